use std::path::Path;

use lesionbench_core::losses::LossKind;
use lesionbench_core::sampling::Sampler;
use lesionbench_core::synthgen::{write_dataset, SynthConfig};
use lesionbench_core::{load_manifest, Split};
use lesionbench_nn::{Arch, ModelConfig};
use lesionbench_runner::report::{case_table, inference_table, performance_table};
use lesionbench_runner::{bench_inference, evaluate, train, Checkpoint, ExperimentConfig};

fn dataset(dir: &Path, n: usize, test_fraction: f64) -> std::path::PathBuf {
    let synth = SynthConfig {
        volume_shape: [16, 16, 16],
        spacing: [1.0; 3],
        lesion_count_range: [1, 2],
        lesion_volume_range_mm3: [20.0, 60.0],
        lesion_volume_median_mm3: 35.0,
        seed: 11,
        ..SynthConfig::default()
    };
    write_dataset(&synth, n, test_fraction, &dir.join("data")).unwrap();
    dir.join("data/manifest.csv")
}

fn config(dir: &Path, manifest: std::path::PathBuf, kind: LossKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: manifest,
        model: ModelConfig {
            base_width: 2,
            depth: 2,
            ..ModelConfig::new(Arch::VNet)
        },
        sampler: Sampler::ThreeDim,
        epochs: 2,
        val_fraction: 0.25,
        checkpoint_dir: dir.join("ck"),
        output_dir: dir.join("out"),
        ..ExperimentConfig::default()
    };
    cfg.loss.kind = kind;
    cfg.optimizer.learning_rate = 1e-3;
    cfg
}

#[test]
fn two_epoch_smoke_run_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 5, 0.2);
    let cfg = config(dir.path(), manifest.clone(), LossKind::CeMinusLogDice);
    let out = train(&cfg).unwrap();
    assert!(out.checkpoint_path.exists());
    assert_eq!(out.log.len(), 2);
    let text = std::fs::read_to_string(&out.log_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_dice,val_collapse_fraction");
    assert_eq!(lines.len(), 3);

    let ck = Checkpoint::load(&out.checkpoint_path).unwrap();
    assert_eq!(ck, out.best);
    let report = evaluate(&ck, &load_manifest(&manifest).unwrap(), Split::Test).unwrap();
    assert_eq!(report.cases.len(), 1);
    assert_eq!(report.meta.model, "v_net");
    assert_eq!(report.meta.sampler, "three_dim");
    assert_eq!(report.meta.loss, "ce_minus_log_dice");
    assert_eq!(report.meta.checkpoint_id, ck.id());
    let row = &performance_table(std::slice::from_ref(&report), 0).rows[0];
    assert_eq!(&row[..4], &["v_net", &report.meta.num_parameters.to_string(), "three_dim", "ce_minus_log_dice"]);
    assert_eq!(case_table(&report).rows.len(), 1);

    let bench = bench_inference(&ck, &load_manifest(&manifest).unwrap(), Split::Test).unwrap();
    assert_eq!(bench.num_parameters, report.meta.num_parameters);
    let t = inference_table(&[bench]);
    assert_eq!(t.rows[0][0], "Inference time (minutes:seconds)");
    assert_eq!(t.rows[1][0], "Number of parameters");
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 4, 0.0);
    let run = || {
        let mut cfg = config(dir.path(), manifest.clone(), LossKind::CeMinusLogDice);
        cfg.model.norm = lesionbench_nn::Norm::Dropout;
        cfg.model.dropout_rate = 0.2;
        train(&cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.params, b.best.params);
    assert_eq!(a.best.id(), b.best.id());
}

#[test]
fn weighted_ce_run_logs_collapse_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 5, 0.0);
    let cfg = config(dir.path(), manifest, LossKind::WeightedCe);
    let out = train(&cfg).unwrap();
    for e in &out.log {
        let f = e.val_collapse_fraction.expect("diagnostic present");
        assert!((0.0..=1.0).contains(&f));
    }
    let text = std::fs::read_to_string(&out.log_path).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 4 && !l.ends_with(',')));
}

#[test]
fn yaml_config_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4, 0.0);
    let path = dir.path().join("exp.yaml");
    std::fs::write(
        &path,
        "dataset: data/manifest.csv\nmodel:\n  arch: u_net\n  base_width: 2\n  depth: 2\nsampler: two_dim\nbatch_size: 8\nepochs: 1\naugment:\n  enabled: true\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    let out = train(&cfg).unwrap();
    assert_eq!(out.log.len(), 1);
    assert!(dir.path().join("checkpoints/best.json").exists());
    assert!(dir.path().join("output/train_log.csv").exists());
}

#[test]
fn incompatible_sampler_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, 0.0);
    let mut cfg = config(dir.path(), manifest, LossKind::CrossEntropy);
    cfg.sampler = Sampler::TwoDim;
    assert!(train(&cfg).is_err());
    assert!(!dir.path().join("ck").exists());
}
