use std::path::PathBuf;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use lesionbench_core::load_manifest;
use lesionbench_core::losses::{compute_class_ratios, evaluate as evaluate_loss, LossConfig, ProbLayout, RatioScope};
use lesionbench_core::seed::derive_seed;
use lesionbench_core::{CaseRecord, Split};
use lesionbench_nn::{build_model, Adam, Model, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{carve_validation, epoch_batches, load_split, Batch};
use crate::error::{io, Result, RunnerError};
use crate::evaluate::{collapse_fraction, mean_dice, score_cases};
use crate::predict::ModelPredictor;

/// One optimiser over one model and objective.
pub struct Trainer {
    model: Model,
    optim: Adam,
    loss: LossConfig,
    /// Fixed ratios for weighted objectives; `None` means per-batch.
    ratios: Option<Vec<f64>>,
    steps: u64,
    seed: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: &ExperimentConfig, ratios: Option<Vec<f64>>) -> Result<Self> {
        let optim = Adam::new(cfg.optimizer.adam()?, model.params());
        Ok(Trainer {
            model,
            optim,
            loss: cfg.loss.clone(),
            ratios,
            steps: 0,
            seed: cfg.seed,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forward, loss, backward and one optimiser update. Returns the loss
    /// before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let tape = self.model.forward_train(batch.input.clone(), derive_seed(self.seed, "dropout", self.steps))?;
        let probs = tape.output();
        let [n, k, d, h, w] = probs.shape();
        let layout = ProbLayout::new(n, k, d * h * w);
        let batch_ratios;
        let ratios: &[f64] = match (&self.ratios, self.loss.kind.is_weighted()) {
            (_, false) => &[],
            (Some(r), true) => r,
            (None, true) => {
                batch_ratios = compute_class_ratios([batch.labels.as_slice()], k)?;
                &batch_ratios
            }
        };
        let loss = evaluate_loss(&self.loss, probs.data(), &batch.labels, layout, ratios)?;
        if !loss.value.is_finite() {
            return Err(RunnerError::Config(format!(
                "loss diverged at step {}; lower optimizer.learning_rate",
                self.steps
            )));
        }
        let grads = self.model.backward(&tape, Tensor::from_vec(probs.shape(), loss.grad)?)?;
        self.model.update_running_stats(&tape);
        drop(tape);
        self.optim.step(self.model.params_mut(), &grads);
        self.steps += 1;
        Ok(loss.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
    /// Share of monitored cases predicted entirely as background.
    pub val_collapse_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Class ratios fixed for the run, or `None` when they vary per batch.
pub fn run_ratios(cfg: &ExperimentConfig, train: &[CaseRecord]) -> Result<Option<Vec<f64>>> {
    if let Some(r) = &cfg.loss.class_ratios {
        return Ok(Some(r.clone()));
    }
    if !cfg.loss.kind.is_weighted() || cfg.loss.ratio_scope == RatioScope::Volume {
        return Ok(None);
    }
    let labels: Vec<&[u8]> = train
        .iter()
        .map(|c| c.label.data().as_slice().expect("standard layout labels"))
        .collect();
    Ok(Some(compute_class_ratios(labels, cfg.model.num_classes)?))
}

/// Rough training footprint in bytes: every activation kept for the
/// backward pass, plus an equally sized gradient.
pub fn estimate_training_bytes(model: &Model, input: &Tensor) -> Result<usize> {
    let [n, c, d, h, w] = input.shape();
    let shapes = model.graph().infer_shapes(model.params(), [c, d, h, w])?;
    let elems: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    Ok(elems * n * 8 * 2)
}

fn check_memory(cfg: &ExperimentConfig, model: &Model, batch: &Batch) -> Result<()> {
    let Some(budget) = cfg.memory_budget_mb else {
        return Ok(());
    };
    let need = estimate_training_bytes(model, &batch.input)?.div_ceil(1024 * 1024);
    if need > budget {
        return Err(RunnerError::Config(format!(
            "a training step needs about {need} MiB (budget {budget} MiB); use a smaller batch_size, patch size or base_width"
        )));
    }
    Ok(())
}

/// Train on the manifest's training split with a held-out validation carve.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.dataset)?;
    let cases = load_split(&manifest, Split::Train, cfg.num_classes(), &cfg.preprocess)?;
    let (train, val) = carve_validation(cases, cfg.val_fraction, cfg.seed);
    train_on_cases(cfg, &train, &val)
}

/// Epoch loop over preloaded cases. When `val` is empty the training cases
/// are monitored instead.
pub fn train_on_cases(cfg: &ExperimentConfig, train: &[CaseRecord], val: &[CaseRecord]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(RunnerError::Empty("training split is empty".into()));
    }
    if val.is_empty() {
        warn!("no validation cases; monitoring the training cases");
    }
    let monitor = if val.is_empty() { train } else { val };
    let ratios = run_ratios(cfg, train)?;
    let model = build_model(&cfg.model, cfg.seed)?;
    info!(
        "training {} ({} parameters) on {} cases, validating on {}",
        cfg.model.display_name(),
        model.num_parameters(),
        train.len(),
        monitor.len()
    );
    let mut trainer = Trainer::new(model, cfg, ratios.clone())?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(io(&cfg.output_dir))?;
    let log_path = cfg.output_dir.join("train_log.csv");
    let checkpoint_path = cfg.checkpoint_dir.join("best.json");
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(cfg, train, epoch)?;
        if epoch == 0 {
            if let Some(b) = batches.first() {
                check_memory(cfg, trainer.model(), b)?;
            }
        }
        let mut total = 0.0;
        for b in &batches {
            total += trainer.step(b)?;
        }
        let train_loss = total / batches.len().max(1) as f64;

        let predictor = ModelPredictor::new(trainer.model().clone(), cfg.sampler, cfg.patch);
        let scored = score_cases(&predictor, monitor)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_dice: mean_dice(&scored),
            val_collapse_fraction: collapse_fraction(&scored),
        };
        info!(
            "epoch {epoch}: loss {train_loss:.5}, val dice {:?}, all-background predictions {:?}",
            entry.val_dice, entry.val_collapse_fraction
        );
        if entry.val_collapse_fraction == Some(1.0) {
            warn!("epoch {epoch}: every validation case was predicted as background only");
        }
        let score = entry.val_dice.unwrap_or(f64::NEG_INFINITY);
        let improved = best.as_ref().is_none_or(|b| score > b.val_dice.unwrap_or(f64::NEG_INFINITY));
        if improved {
            let ck = Checkpoint::new(cfg.clone(), trainer.model(), epoch, entry.val_dice, ratios.clone());
            ck.save(&checkpoint_path)?;
            best = Some(ck);
        }
        log.push(entry);
        write_log(&log_path, &log)?;
    }
    let best = best.ok_or_else(|| RunnerError::Config("epochs must be positive".into()))?;
    Ok(TrainOutcome {
        best,
        log,
        checkpoint_path,
        log_path,
    })
}

fn write_log(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(io(path))
}
