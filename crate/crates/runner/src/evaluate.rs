use log::warn;
use rayon::prelude::*;

use lesionbench_core::metrics::{aggregate, evaluate_case, region_names, CaseRow, EvalReport, ReportMeta};
use lesionbench_core::{CaseRecord, DatasetManifest, Diagnosis, Split};

use crate::checkpoint::Checkpoint;
use crate::data::prepare_case;
use crate::error::{Result, RunnerError};
use crate::predict::{predict_case, ModelPredictor, Predictor};

/// Metrics of one case plus whether the prediction was entirely background.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCase {
    pub row: CaseRow,
    pub all_background: bool,
}

pub fn score_case(predictor: &dyn Predictor, case: &CaseRecord) -> Result<ScoredCase> {
    let pred = predict_case(predictor, case)?;
    let metrics = evaluate_case(&pred, &case.label)?;
    Ok(ScoredCase {
        row: CaseRow {
            case_id: case.case_id.clone(),
            diagnosis: case.diagnosis,
            metrics,
        },
        all_background: pred.foreground_count() == 0,
    })
}

/// Scores cases in parallel; output order follows the input.
pub fn score_cases(predictor: &dyn Predictor, cases: &[CaseRecord]) -> Result<Vec<ScoredCase>> {
    cases.par_iter().map(|c| score_case(predictor, c)).collect()
}

/// Mean over cases of the per-case mean region dice.
pub fn mean_dice(scored: &[ScoredCase]) -> Option<f64> {
    let per_case: Vec<f64> = scored
        .iter()
        .filter_map(|s| {
            let d: Vec<f64> = s.row.metrics.iter().filter_map(|m| m.dice).collect();
            (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
        })
        .collect();
    (!per_case.is_empty()).then(|| per_case.iter().sum::<f64>() / per_case.len() as f64)
}

pub fn collapse_fraction(scored: &[ScoredCase]) -> Option<f64> {
    (!scored.is_empty()).then(|| scored.iter().filter(|s| s.all_background).count() as f64 / scored.len() as f64)
}

/// Drops trigeminal-neuralgia cases from a test split, warning for each.
pub fn drop_tn_test_cases(cases: Vec<CaseRecord>) -> Vec<CaseRecord> {
    cases
        .into_iter()
        .filter(|c| {
            let skip = c.diagnosis == Diagnosis::Tn && c.split == Split::Test;
            if skip {
                warn!("skipping {}: tn cases are training-only", c.case_id);
            }
            !skip
        })
        .collect()
}

pub fn report_meta(ck: &Checkpoint) -> ReportMeta {
    let cfg = &ck.config;
    ReportMeta {
        model: cfg.model.display_name(),
        num_parameters: ck.params.count() as u64,
        sampler: cfg.sampler.key().to_string(),
        loss: cfg.loss.kind.key().to_string(),
        checkpoint_id: ck.id(),
    }
}

pub fn evaluate_with(predictor: &dyn Predictor, cases: &[CaseRecord], meta: ReportMeta) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(RunnerError::Empty("no cases to evaluate".into()));
    }
    let rows = score_cases(predictor, cases)?.into_iter().map(|s| s.row).collect();
    Ok(aggregate(rows, region_names(predictor.num_classes() as u8), meta)?)
}

/// Predict and score every case of `split` with the checkpoint's model.
pub fn evaluate(ck: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<EvalReport> {
    let cfg = &ck.config;
    let cases = manifest
        .split(split)
        .map(|r| prepare_case(r, cfg.num_classes(), &cfg.preprocess))
        .collect::<Result<Vec<_>>>()?;
    let cases = drop_tn_test_cases(cases);
    let predictor = ModelPredictor::from_checkpoint(ck)?;
    evaluate_with(&predictor, &cases, report_meta(ck))
}
