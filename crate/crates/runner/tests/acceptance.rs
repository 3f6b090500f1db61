//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array3, Array4, Array5, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use lesionbench_core::losses::{self, DiceVariant, LossConfig, LossKind, ProbLayout};
use lesionbench_core::metrics::{
    aggregate, confusion, hard_dice, merge_brats_classes, precision, sensitivity, CaseRow, EvalReport, Metrics, ReportMeta,
};
use lesionbench_core::preprocess::{preprocess_case, CropSpec};
use lesionbench_core::sampling::{center_patch_origins, reassemble, sample_center_patch, tile_for_inference, uniform_patch_origins, PatchSpec, Sampler};
use lesionbench_core::synthgen::{write_dataset, SynthConfig};
use lesionbench_core::{load_manifest, CaseRecord, Diagnosis, ImageVolume, LabelVolume, Split};
use lesionbench_nn::gradcheck::check_gradients;
use lesionbench_nn::{build_model, Arch, ModelConfig, Norm, Op, OpKind, Tensor};
use lesionbench_runner::report::{inference_table, performance_table, stacked_csv, stacked_markdown, supplementary_tables};
use lesionbench_runner::{evaluate, train, BenchReport, ExperimentConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, format!("{what}: got {a}, expected {b}"))
}

// ---------------------------------------------------------------- losses

fn oracle_wce(p: &[f64], g: &[u8], r: &[f64]) -> f64 {
    let v = g.len();
    (0..v).map(|i| -p[g[i] as usize * v + i].clamp(1e-7, 1.0).ln() / r[g[i] as usize]).sum::<f64>() / v as f64
}

fn oracle_dice(p_fg: &[f64], g_fg: &[f64], squared: bool, eps: f64) -> f64 {
    let inter: f64 = p_fg.iter().zip(g_fg).map(|(p, g)| p * g).sum();
    let den: f64 = if squared {
        p_fg.iter().map(|p| p * p).sum::<f64>() + g_fg.iter().map(|g| g * g).sum::<f64>()
    } else {
        p_fg.iter().sum::<f64>() + g_fg.iter().sum::<f64>()
    };
    (2.0 * inter + eps) / (den + eps)
}

fn criterion_1() -> Outcome {
    let eps = 1e-5;
    let tol = 1e-5;
    let r = losses::compute_class_ratios([[0u8, 0, 0, 0, 0, 0, 0, 0, 0, 1].as_slice()], 2).map_err(|e| e.to_string())?;
    close(r[0], 0.9, tol, "ratio bg")?;
    close(r[1], 0.1, tol, "ratio fg")?;

    // 1 voxel, truth fg, p_fg 0.5, ratios (0.9, 0.1)
    let (p, g, ratios) = (vec![0.5, 0.5], vec![1u8], vec![0.9, 0.1]);
    let got = losses::weighted_cross_entropy(&p, &g, ProbLayout::new(1, 2, 1), &ratios).map_err(|e| e.to_string())?;
    close(got, oracle_wce(&p, &g, &ratios), tol, "wce oracle")?;
    close(got, 6.93147, tol, "wce 1 voxel")?;

    // 2 background voxels with p_bg 0.8, r_bg 0.5
    let (p, g, ratios) = (vec![0.8, 0.8, 0.2, 0.2], vec![0u8, 0], vec![0.5, 0.5]);
    let got = losses::weighted_cross_entropy(&p, &g, ProbLayout::new(1, 2, 2), &ratios).map_err(|e| e.to_string())?;
    close(got, oracle_wce(&p, &g, &ratios), tol, "wce oracle")?;
    close(got, 0.44629, tol, "wce 2 voxels")?;

    // p = (0.5, 0.5), g = (1, 0)
    let p = vec![0.5, 0.5, 0.5, 0.5];
    let g = vec![1u8, 0];
    let layout = ProbLayout::new(1, 2, 2);
    let d2 = losses::soft_dice(&p, &g, layout, DiceVariant::D2, eps).map_err(|e| e.to_string())?;
    let d1 = losses::soft_dice(&p, &g, layout, DiceVariant::D1, eps).map_err(|e| e.to_string())?;
    close(d2, oracle_dice(&[0.5, 0.5], &[1.0, 0.0], false, eps), tol, "D2 oracle")?;
    close(d1, oracle_dice(&[0.5, 0.5], &[1.0, 0.0], true, eps), tol, "D1 oracle")?;
    close(d2, 0.5, tol, "D2")?;
    close(d1, 0.66667, tol, "D1")?;

    let got = losses::ce_minus_log_dice(&p, &g, layout, &[0.5, 0.5], DiceVariant::D2, eps).map_err(|e| e.to_string())?;
    let oracle = oracle_wce(&p, &g, &[0.5, 0.5]) - oracle_dice(&[0.5, 0.5], &[1.0, 0.0], false, eps).ln();
    close(got, oracle, tol, "composite oracle")?;
    close(got, 2.07944, tol, "composite")?;

    // perfect prediction and empty-vs-empty conventions
    let perfect = vec![0.0, 1.0, 1.0, 0.0];
    close(losses::weighted_cross_entropy(&perfect, &g, layout, &[0.5, 0.5]).map_err(|e| e.to_string())?, 0.0, 1e-6, "wce perfect")?;
    close(losses::ce_minus_log_dice(&perfect, &g, layout, &[0.5, 0.5], DiceVariant::D2, eps).map_err(|e| e.to_string())?, 0.0, tol, "composite perfect")?;
    let bg = vec![1.0, 1.0, 0.0, 0.0];
    close(losses::soft_dice(&bg, &[0, 0], layout, DiceVariant::D1, eps).map_err(|e| e.to_string())?, 1.0, tol, "empty dice")?;
    Ok("all loss examples within 1e-5".into())
}

// -------------------------------------------------------------- gradients

fn criterion_2() -> Outcome {
    let cfg = ModelConfig {
        base_width: 2,
        depth: 2,
        ..ModelConfig::new(Arch::VNet)
    };
    let model = build_model(&cfg, 5).map_err(|e| e.to_string())?;
    let n_params = model.num_parameters();
    ensure(n_params <= 5_000, format!("{n_params} parameters"))?;
    let x = Tensor::from_fn([1, 1, 8, 8, 8], |i| ((i[2] * 5 + i[3] * 3 + i[4]) as f64 * 0.43).cos());
    let labels: Vec<u8> = (0..512).map(|i| u8::from(i % 9 == 0 || (i / 64 == 4 && i % 3 == 1))).collect();
    let ratios = losses::compute_class_ratios([labels.as_slice()], 2).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for kind in [LossKind::WeightedCe, LossKind::SoftDice, LossKind::CeMinusLogDice] {
        let config = LossConfig {
            kind,
            ..LossConfig::default()
        };
        let f = |p: &Tensor| {
            let layout = ProbLayout::new(p.batch(), p.channels(), p.voxels());
            let lv = losses::evaluate(&config, p.data(), &labels, layout, &ratios).expect("loss");
            (lv.value, Tensor::from_vec(p.shape(), lv.grad).expect("grad shape"))
        };
        let samples = check_gradients(&model, &x, 3, 24, 1e-5, f).map_err(|e| e.to_string())?;
        for s in &samples {
            worst = worst.max(s.rel_error());
            ensure(s.rel_error() < 1e-3, format!("{kind:?}: {s:?}"))?;
        }
        checked += samples.len();
    }
    ensure(checked >= 20, "too few samples")?;
    Ok(format!("{checked} parameters over 3 losses, {n_params}-parameter v_net, max rel err {worst:.2e}"))
}

// --------------------------------------------------------------- sampling

fn blank_case(shape: [usize; 3], fg: &[[usize; 3]]) -> CaseRecord {
    let img = Array4::<f32>::zeros((1, shape[0], shape[1], shape[2]));
    let mut lab = Array3::<u8>::zeros(shape);
    for v in fg {
        lab[*v] = 1;
    }
    CaseRecord::new(
        "fixture",
        ImageVolume::new(img, [1.0; 3], [0.0; 3]).unwrap(),
        LabelVolume::new(lab, 2).unwrap(),
        None,
        Diagnosis::Synthetic,
        Split::Train,
    )
    .unwrap()
}

fn criterion_3() -> Outcome {
    // 40³ with 64 foreground voxels: fraction 0.001
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fg = HashSet::new();
    while fg.len() < 64 {
        fg.insert([rng.random_range(0..40), rng.random_range(0..40), rng.random_range(0..40)]);
    }
    let fg: Vec<[usize; 3]> = fg.into_iter().collect();
    let case = blank_case([40, 40, 40], &fg);
    let spec = PatchSpec {
        size: [8, 8, 8],
        restrict_to_mask: false,
    };
    let batch = sample_center_patch(&case, &spec, 1000, 17).map_err(|e| e.to_string())?;
    let hits = batch.labels.axis_iter(Axis(0)).filter(|l| l.iter().any(|&v| v != 0)).count();
    ensure(hits == 1000, format!("center_patch: {hits}/1000 patches with foreground"))?;
    ensure(center_patch_origins(&case, &spec, 1000, 17).map_err(|e| e.to_string())? == batch.origins, "origin helper disagrees")?;
    // uniform placement oracle for contrast
    let uniform_hits = (0..1000)
        .filter(|_| {
            let o = [rng.random_range(0..33), rng.random_range(0..33), rng.random_range(0..33)];
            fg.iter().any(|v| (0..3).all(|a| v[a] >= o[a] && v[a] < o[a] + 8))
        })
        .count();

    let big = blank_case([128, 128, 128], &[[0, 0, 0]]);
    let spec = PatchSpec {
        size: [64, 64, 64],
        restrict_to_mask: false,
    };
    let n = 10_000;
    let origins = uniform_patch_origins(&big, &spec, n, 23).map_err(|e| e.to_string())?;
    let chi = ChiSquared::new(64.0).unwrap();
    let mut pvals = Vec::new();
    for a in 0..3 {
        let mut counts = [0f64; 65];
        for o in &origins {
            counts[o[a]] += 1.0;
        }
        let expected = n as f64 / 65.0;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - chi.cdf(stat);
        ensure(p > 0.01, format!("uniform_patch axis {a}: chi-square p = {p}"))?;
        pvals.push(p);
    }
    Ok(format!(
        "center_patch 1000/1000 (uniform oracle {uniform_hits}/1000); uniform_patch marginal p = {:.3}/{:.3}/{:.3}",
        pvals[0], pvals[1], pvals[2]
    ))
}

// ------------------------------------------------------------- reassembly

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (shape, size) in [([128, 128, 128], [64, 64, 64]), ([32, 32, 32], [16, 8, 32])] {
        let img = Array4::from_shape_fn((1, shape[0], shape[1], shape[2]), |_| rng.random::<f32>());
        let case = CaseRecord::new(
            "tile",
            ImageVolume::new(img.clone(), [1.0; 3], [0.0; 3]).unwrap(),
            LabelVolume::new(Array3::zeros(shape), 2).unwrap(),
            None,
            Diagnosis::Synthetic,
            Split::Test,
        )
        .unwrap();
        let tiles = tile_for_inference(&case, &PatchSpec { size, restrict_to_mask: false }).map_err(|e| e.to_string())?;
        let preds = tiles.patches.mapv(f64::from);
        let back = reassemble(preds.view(), &tiles.origins, tiles.source_shape).map_err(|e| e.to_string())?;
        ensure(back == img.mapv(f64::from), format!("tiling of {shape:?} by {size:?} is not an exact round trip"))?;
    }

    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let size = [rng.random_range(4..=20), rng.random_range(4..=20), rng.random_range(4..=20)];
        let k = 2 + trial % 3;
        let mut origins: Vec<[usize; 3]> = Vec::new();
        // a grid guarantees coverage; random extras add overlap
        for z in (0..32).step_by(size[0]) {
            for y in (0..32).step_by(size[1]) {
                for x in (0..32).step_by(size[2]) {
                    origins.push([z.min(32 - size[0]), y.min(32 - size[1]), x.min(32 - size[2])]);
                }
            }
        }
        for _ in 0..rng.random_range(5..40) {
            origins.push([
                rng.random_range(0..=32 - size[0]),
                rng.random_range(0..=32 - size[1]),
                rng.random_range(0..=32 - size[2]),
            ]);
        }
        let preds = Array5::from_shape_fn((origins.len(), k, size[0], size[1], size[2]), |_| rng.random::<f64>());
        let got = reassemble(preds.view(), &origins, [32, 32, 32]).map_err(|e| e.to_string())?;
        let mut sum = vec![0.0f64; k * 32 * 32 * 32];
        let mut count = vec![0u32; 32 * 32 * 32];
        for (i, o) in origins.iter().enumerate() {
            for c in 0..k {
                for z in 0..size[0] {
                    for y in 0..size[1] {
                        for x in 0..size[2] {
                            let v = ((o[0] + z) * 32 + o[1] + y) * 32 + o[2] + x;
                            sum[c * 32768 + v] += preds[[i, c, z, y, x]];
                            if c == 0 {
                                count[v] += 1;
                            }
                        }
                    }
                }
            }
        }
        for c in 0..k {
            for v in 0..32768 {
                ensure(count[v] > 0, "cover has a hole")?;
                let expect = sum[c * 32768 + v] / count[v] as f64;
                let (z, y, x) = (v / 1024, (v / 32) % 32, v % 32);
                worst = worst.max((got[[c, z, y, x]] - expect).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("overlap mismatch {worst}"))?;
    Ok(format!("exact on 128³/64³ and 32³ tilings; 20 random covers max err {worst:.1e}"))
}

// ---------------------------------------------------------------- metrics

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for pair in 0..100 {
        let shape = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let (dp, dg) = (rng.random::<f64>(), rng.random::<f64>());
        let p = Array3::from_shape_fn(shape, |_| rng.random_bool(dp));
        let g = Array3::from_shape_fn(shape, |_| rng.random_bool(dg));
        let set = |m: &Array3<bool>| -> HashSet<usize> { m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect() };
        let (ps, gs) = (set(&p), set(&g));
        let inter = ps.intersection(&gs).count();
        let o_dice = if ps.len() + gs.len() == 0 { 1.0 } else { 2.0 * inter as f64 / (ps.len() + gs.len()) as f64 };
        let o_prec = (!ps.is_empty()).then(|| inter as f64 / ps.len() as f64);
        let o_sens = (!gs.is_empty()).then(|| inter as f64 / gs.len() as f64);
        let c = confusion(p.view(), g.view()).map_err(|e| e.to_string())?;
        ensure(
            hard_dice(&c) == Some(o_dice) && precision(&c) == o_prec && sensitivity(&c) == o_sens,
            format!("pair {pair}: {:?} vs oracle ({o_dice}, {o_prec:?}, {o_sens:?})", Metrics::from_counts(&c)),
        )?;
    }
    for _ in 0..50 {
        let lab = Array3::from_shape_fn((6, 7, 8), |_| rng.random_range(0..5u8));
        let r = merge_brats_classes(&LabelVolume::new(lab.clone(), 5).unwrap()).map_err(|e| e.to_string())?;
        for ((i, &l), ((&w, &c), &e)) in lab.indexed_iter().zip(r.whole.iter().zip(r.core.iter()).zip(r.enhancing.iter())) {
            ensure(!e || c, format!("enhancing outside core at {i:?}"))?;
            ensure(!c || w, format!("core outside whole at {i:?}"))?;
            ensure(w == (l != 0) && c == matches!(l, 1 | 3 | 4) && e == (l == 4), format!("region mismatch at {i:?}"))?;
        }
    }
    Ok("100 mask pairs exact; BraTS nesting holds on 50 volumes".into())
}

// ---------------------------------------------------------- architectures

fn criterion_6() -> Outcome {
    for arch in Arch::ALL {
        let cfg = ModelConfig {
            base_width: 2,
            depth: 2,
            pyramid_bins: vec![1, 2],
            ..ModelConfig::new(arch)
        };
        let model = build_model(&cfg, 1).map_err(|e| e.to_string())?;
        let shape = if arch.is_3d() { [1, 1, 16, 16, 16] } else { [2, 1, 1, 24, 24] };
        let x = Tensor::from_fn(shape, |i| ((i[0] + i[2] * 3 + i[3] * 5 + i[4] * 7) as f64 * 0.3).sin());
        let out = model.forward(x.clone()).map_err(|e| e.to_string())?;
        ensure(out.spatial() == x.spatial() && out.batch() == x.batch(), format!("{arch}: shape {:?}", out.shape()))?;
        for b in 0..out.batch() {
            for v in 0..out.voxels() {
                let s: f64 = (0..out.channels()).map(|c| out.plane(b, c)[v]).sum();
                ensure((s - 1.0).abs() < 1e-5, format!("{arch}: voxel sums to {s}"))?;
            }
        }
    }
    for arch in [Arch::Deconvnet, Arch::UNet] {
        let m = build_model(&ModelConfig::new(arch), 0).map_err(|e| e.to_string())?;
        ensure(m.graph().nodes().iter().all(|n| !n.op.kind().is_pool_or_upsample()), format!("{arch} has pooling"))?;
    }
    let unet = build_model(&ModelConfig { depth: 4, ..ModelConfig::new(Arch::UNet) }, 0).map_err(|e| e.to_string())?;
    let skips = unet.graph().nodes().iter().filter(|n| n.op.kind() == OpKind::Concat && n.name.contains("skip")).count();
    ensure(skips == 3, format!("u_net depth 4 has {skips} skips"))?;
    let vd = build_model(&ModelConfig::v_net_dropout(0.1), 0).map_err(|e| e.to_string())?;
    ensure(
        vd.graph().count(OpKind::Dropout) > 0 && vd.graph().count(OpKind::BatchNorm) == 0 && vd.config().norm == Norm::Dropout,
        "v_net_dropout still uses batch norm",
    )?;
    let dm = build_model(&ModelConfig::new(Arch::Deepmedic), 0).map_err(|e| e.to_string())?;
    let scopes = dm.graph().top_scopes();
    ensure(scopes.iter().any(|s| s == "high") && scopes.iter().any(|s| s == "low"), "deepmedic lacks two pathways")?;
    ensure(
        dm.graph().nodes().iter().any(|n| n.name.starts_with("low/") && matches!(n.op, Op::AvgPool { .. })),
        "deepmedic low pathway is not downsampled",
    )?;
    Ok("5 architectures shape-preserving and normalised; structural checks hold".into())
}

// ------------------------------------------------- synthetic loss experiment

struct Experiment {
    ce_dice: f64,
    wce_dice: f64,
    repeat_dice: f64,
    wce_collapse: Option<f64>,
    elapsed: Duration,
}

fn experiment_config(root: &Path, manifest: &Path, kind: LossKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: manifest.to_path_buf(),
        model: ModelConfig {
            base_width: 4,
            depth: 3,
            ..ModelConfig::new(Arch::VNet)
        },
        sampler: Sampler::ThreeDim,
        epochs: 15,
        seed: 0,
        checkpoint_dir: root.join("checkpoints"),
        output_dir: root.join("output"),
        ..ExperimentConfig::default()
    };
    cfg.loss.kind = kind;
    cfg.optimizer.learning_rate = 1e-3;
    cfg
}

fn run_experiment() -> Result<Experiment, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        volume_shape: [32, 32, 32],
        spacing: [1.0; 3],
        lesion_count_range: [1, 1],
        lesion_volume_range_mm3: [30.0, 80.0],
        lesion_volume_median_mm3: 49.0,
        seed: 7,
        ..SynthConfig::default()
    };
    let manifest = write_dataset(&synth, 60, 10.0 / 60.0, &dir.path().join("data")).map_err(|e| e.to_string())?;
    let n_train = manifest.split(Split::Train).count();
    ensure(n_train == 50, format!("{n_train} training cases"))?;
    let manifest_path = dir.path().join("data/manifest.csv");
    let runs = [
        ("ce", LossKind::CeMinusLogDice),
        ("wce", LossKind::WeightedCe),
        ("repeat", LossKind::CeMinusLogDice),
    ];
    let results: Vec<Result<(f64, Option<f64>), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(name, kind)| {
                let cfg = experiment_config(&dir.path().join(name), &manifest_path, *kind);
                s.spawn(move || -> Result<(f64, Option<f64>), String> {
                    let out = train(&cfg).map_err(|e| e.to_string())?;
                    let manifest = load_manifest(&cfg.dataset).map_err(|e| e.to_string())?;
                    let report = evaluate(&out.best, &manifest, Split::Test).map_err(|e| e.to_string())?;
                    let dice = report.overall[0].dice.ok_or("undefined dice")?;
                    Ok((dice, out.log.last().and_then(|e| e.val_collapse_fraction)))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread")).collect()
    });
    let [ce, wce, repeat]: [Result<(f64, Option<f64>), String>; 3] = results.try_into().expect("three runs");
    let (ce, wce, repeat) = (ce?, wce?, repeat?);
    Ok(Experiment {
        ce_dice: ce.0,
        wce_dice: wce.0,
        repeat_dice: repeat.0,
        wce_collapse: wce.1,
        elapsed: start.elapsed(),
    })
}

fn criterion_7(e: &Result<Experiment, String>) -> Outcome {
    let e = e.as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "ce_minus_log_dice {:.4} vs weighted_ce {:.4} (wce collapse fraction {:?}), {:.0?} for 3 runs",
        e.ce_dice, e.wce_dice, e.wce_collapse, e.elapsed
    );
    ensure(e.ce_dice >= 0.5, format!("dice below 0.5: {detail}"))?;
    ensure(e.ce_dice - e.wce_dice >= 0.05, format!("margin below 0.05: {detail}"))?;
    Ok(detail)
}

fn criterion_9(e: &Result<Experiment, String>) -> Outcome {
    let e = e.as_ref().map_err(Clone::clone)?;
    let (a, b) = (format!("{:.6}", e.ce_dice), format!("{:.6}", e.repeat_dice));
    ensure(a == b, format!("{a} vs {b}"))?;
    Ok(format!("repeat run dice {b}"))
}

// ----------------------------------------------------------- preprocessing

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut shapes = Vec::new();
    for spacing in [1.0, 1.5, 2.0] {
        for extent in [200.0, 25.0] {
            let src = [60, 70, 50];
            let img = Array4::from_shape_fn((2, src[0], src[1], src[2]), |(c, ..)| rng.random::<f32>() * 300.0 + 50.0 * c as f32);
            let mut mask = Array3::from_elem(src, false);
            mask.slice_mut(ndarray::s![10..50, 20..60, 5..45]).fill(true);
            let case = CaseRecord::new(
                "pre",
                ImageVolume::new(img, [spacing, spacing, spacing], [0.0; 3]).unwrap(),
                LabelVolume::new(Array3::zeros(src), 2).unwrap(),
                Some(mask),
                Diagnosis::Synthetic,
                Split::Train,
            )
            .unwrap();
            let spec = CropSpec {
                extent_mm: [extent; 3],
                pad_value: 0.0,
            };
            let out = preprocess_case(&case, &spec).map_err(|e| e.to_string())?;
            // round half up
            let expect = (extent / spacing + 0.5).floor() as usize;
            ensure(out.spatial_shape() == [expect; 3], format!("spacing {spacing}, extent {extent}: {:?} vs {expect}", out.spatial_shape()))?;
            shapes.push(expect);
            for c in 0..2 {
                let ch = out.image.channel(c);
                let n = ch.len() as f64;
                let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
                let std = (ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
                ensure(mean.abs() < 1e-5 && (std - 1.0).abs() < 1e-4, format!("channel {c}: mean {mean}, std {std}"))?;
            }
        }
    }
    Ok(format!("extents {shapes:?}; z-scored channels within tolerance"))
}

// ---------------------------------------------------------------- reports

fn fixture_reports() -> Vec<EvalReport> {
    let models = ["v_net_dropout0.1", "deconvnet", "u_net", "pspnet", "deepmedic"];
    let diags = [
        Diagnosis::Metastasis,
        Diagnosis::Meningioma,
        Diagnosis::Schwannoma,
        Diagnosis::Pituitary,
        Diagnosis::Avm,
        Diagnosis::Other,
    ];
    models
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let cases = (0..12)
                .map(|i| {
                    let d = diags[i % diags.len()];
                    let tp = 3 + (i * 7 + m * 5) % 11;
                    let fp = (i * 3 + m) % 6;
                    let fn_ = (i + 2 * m) % 5;
                    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
                    let precision = if i == 9 && m == 2 { None } else { Some(tp / (tp + fp)) };
                    CaseRow {
                        case_id: format!("case{i:02}"),
                        diagnosis: d,
                        metrics: vec![Metrics {
                            dice: Some(2.0 * tp / (2.0 * tp + fp + fn_)),
                            precision,
                            sensitivity: Some(tp / (tp + fn_)),
                        }],
                    }
                })
                .collect();
            let meta = ReportMeta {
                model: name.to_string(),
                num_parameters: [8_232_274, 12_544_324, 34_524_034, 28_280_773, 1_301_478][m],
                sampler: ["three_dim", "two_dim", "two_dim", "two_dim", "center_patch"][m].to_string(),
                loss: "ce_minus_log_dice".to_string(),
                checkpoint_id: String::new(),
            };
            aggregate(cases, vec!["lesion".into()], meta).unwrap()
        })
        .collect()
}

fn golden(name: &str, got: &str) -> Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, got).map_err(|e| e.to_string())?;
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    ensure(want == got, format!("{name} differs from golden file"))
}

fn criterion_10() -> Outcome {
    let reports = fixture_reports();
    let blocks = supplementary_tables(&reports, 0);
    golden("per_type.csv", &stacked_csv(&blocks))?;
    golden("per_type.md", &stacked_markdown(&blocks))?;
    let perf = performance_table(&reports, 0);
    golden("performance.csv", &perf.to_csv())?;
    golden("performance.md", &perf.to_markdown())?;
    let benches: Vec<BenchReport> = reports
        .iter()
        .zip([171, 240, 241, 883, 1033])
        .map(|(r, secs)| BenchReport {
            model: r.meta.model.clone(),
            num_parameters: r.meta.num_parameters,
            cases: 10,
            elapsed: Duration::from_secs(secs),
        })
        .collect();
    let t4 = inference_table(&benches);
    golden("inference.csv", &t4.to_csv())?;
    golden("inference.md", &t4.to_markdown())?;
    Ok("per-type, performance and inference tables match golden files".into())
}

fn main() {
    // the long training experiment runs alongside the quick checks
    let experiment = std::thread::spawn(run_experiment);
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "loss oracles", criterion_1()),
        (2, "gradient correctness", criterion_2()),
        (3, "sampler guarantees", criterion_3()),
        (4, "reassembly round trip", criterion_4()),
        (5, "metric oracles", criterion_5()),
        (6, "architecture contracts", criterion_6()),
        (8, "preprocessing contract", criterion_8()),
        (10, "report layout", criterion_10()),
    ];
    let e = experiment.join().expect("experiment thread");
    results.push((7, "directional loss claim", criterion_7(&e)));
    results.push((9, "determinism", criterion_9(&e)));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
