use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use lesionbench_core::brats::import_brats;
use lesionbench_core::nifti_io::write_labels;
use lesionbench_core::overlay::write_overlay;
use lesionbench_core::preprocess::{preprocess_case, CropSpec};
use lesionbench_core::synthgen::{write_dataset, SynthConfig};
use lesionbench_core::{load_case, load_manifest, write_case, DatasetManifest, Split};
use lesionbench_runner::data::prepare_case;
use lesionbench_runner::evaluate::{drop_tn_test_cases, evaluate_with, report_meta};
use lesionbench_runner::report::{
    inference_table, performance_table, region_dice_table, stacked_csv, stacked_markdown, supplementary_tables, write_eval_outputs,
    write_table, write_text,
};
use lesionbench_runner::{bench_inference, predict_case, train, Checkpoint, ExperimentConfig, ModelPredictor};

#[derive(Parser)]
#[command(name = "lesionbench", version, about = "Brain lesion segmentation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a YAML experiment config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Score one or more checkpoints and write report tables.
    Evaluate {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write predicted label volumes and overlay images.
    Predict {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
        /// Skip the PNG overlays.
        #[arg(long)]
        no_overlay: bool,
    },
    /// Time inference over a split and report parameter counts.
    Bench {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// YAML generator settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a BraTS directory tree into a manifest.
    ImportBrats {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Crop around the brain and z-score every case of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Physical crop extent in mm (z y x).
        #[arg(long, num_args = 3, default_values_t = [200.0, 200.0, 200.0])]
        extent: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        num_classes: u8,
    },
}

#[derive(Args)]
struct Target {
    /// Checkpoint file; repeat to compare models side by side.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Dataset manifest; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
}

impl Target {
    fn load(&self) -> Result<Vec<(Checkpoint, DatasetManifest)>> {
        self.checkpoint
            .iter()
            .map(|p| {
                let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
                let path = self.manifest.clone().unwrap_or_else(|| ck.config.dataset.clone());
                let manifest = load_manifest(&path).with_context(|| format!("loading {}", path.display()))?;
                Ok((ck, manifest))
            })
            .collect()
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = train(&cfg)?;
            let best = out.log.iter().find(|e| e.epoch == out.best.epoch);
            println!(
                "best epoch {} (val dice {:?}), checkpoint {} [{}], log {}",
                out.best.epoch,
                best.and_then(|e| e.val_dice),
                out.checkpoint_path.display(),
                out.best.id(),
                out.log_path.display()
            );
        }
        Command::Evaluate { target, out } => evaluate(&target, &out)?,
        Command::Predict { target, out, no_overlay } => predict(&target, &out, !no_overlay)?,
        Command::Bench { target, out } => {
            let mut benches = Vec::new();
            for (ck, manifest) in target.load()? {
                let b = bench_inference(&ck, &manifest, target.split)?;
                println!("{}", b.summary());
                benches.push(b);
            }
            let table = inference_table(&benches);
            print!("{}", table.to_markdown());
            if let Some(dir) = out {
                write_table(&dir, "inference", &table)?;
            }
        }
        Command::Synth {
            config,
            n,
            test_fraction,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => serde_yaml::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let manifest = write_dataset(&cfg, n, test_fraction, &out)?;
            println!("{} cases written to {}", manifest.len(), out.join("manifest.csv").display());
        }
        Command::ImportBrats { root, out, test_fraction } => {
            let manifest = import_brats(&root, &out, test_fraction)?;
            println!("{} cases written to {}", manifest.len(), out.join("manifest.csv").display());
        }
        Command::Preprocess {
            manifest,
            out,
            extent,
            num_classes,
        } => {
            let spec = CropSpec {
                extent_mm: [extent[0], extent[1], extent[2]],
                ..CropSpec::default()
            };
            let source = load_manifest(&manifest)?;
            std::fs::create_dir_all(&out)?;
            let rows = source
                .rows
                .iter()
                .map(|row| {
                    let case = preprocess_case(&load_case(row, num_classes)?, &spec)?;
                    info!("{}: {:?}", case.case_id, case.spatial_shape());
                    write_case(&case, &out)
                })
                .collect::<lesionbench_core::Result<Vec<_>>>()?;
            let result = DatasetManifest::new(rows)?;
            result.write(&out.join("manifest.csv"))?;
            println!("{} cases written to {}", result.len(), out.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn evaluate(target: &Target, out: &Path) -> Result<()> {
    let mut reports = Vec::new();
    for (ck, manifest) in target.load()? {
        let report = lesionbench_runner::evaluate(&ck, &manifest, target.split)?;
        let dir = if target.checkpoint.len() > 1 {
            out.join(format!("{}_{}", report.meta.model, report.meta.checkpoint_id))
        } else {
            out.to_path_buf()
        };
        write_eval_outputs(&dir, &report)?;
        reports.push(report);
    }
    let perf = performance_table(&reports, 0);
    print!("{}", perf.to_markdown());
    if reports.len() > 1 {
        write_table(out, "performance", &perf)?;
        if reports[0].regions.len() > 1 {
            write_table(out, "regions", &region_dice_table(&reports))?;
        }
        let blocks = supplementary_tables(&reports, 0);
        write_text(out, "per_type.csv", &stacked_csv(&blocks))?;
        write_text(out, "per_type.md", &stacked_markdown(&blocks))?;
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn predict(target: &Target, out: &Path, overlay: bool) -> Result<()> {
    if target.checkpoint.len() != 1 {
        bail!("predict takes exactly one checkpoint");
    }
    let (ck, manifest) = target.load()?.remove(0);
    let cfg = &ck.config;
    let predictor = ModelPredictor::from_checkpoint(&ck)?;
    let cases = manifest
        .split(target.split)
        .map(|r| prepare_case(r, cfg.num_classes(), &cfg.preprocess))
        .collect::<lesionbench_runner::Result<Vec<_>>>()?;
    let cases = drop_tn_test_cases(cases);
    std::fs::create_dir_all(out)?;
    for case in &cases {
        let pred = predict_case(&predictor, case)?;
        let path = out.join(format!("{}_pred.nii.gz", case.case_id));
        write_labels(&path, pred.data(), case.image.spacing(), case.image.origin())?;
        if overlay {
            write_overlay(
                &out.join(format!("{}_overlay.png", case.case_id)),
                case.image.channel(0),
                case.label.data().view(),
                Some(pred.data().view()),
                None,
            )?;
        }
        info!("{}: {} foreground voxels predicted", case.case_id, pred.foreground_count());
    }
    let report = evaluate_with(&predictor, &cases, report_meta(&ck))?;
    write_eval_outputs(out, &report)?;
    println!("{} predictions written to {}", cases.len(), out.display());
    Ok(())
}
