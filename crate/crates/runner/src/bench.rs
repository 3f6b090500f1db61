use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use lesionbench_core::{CaseRecord, DatasetManifest, Split};

use crate::checkpoint::Checkpoint;
use crate::data::load_split;
use crate::error::{Result, RunnerError};
use crate::predict::{predict_case, ModelPredictor};
use crate::report::{fmt_mm_ss, fmt_param_count};

/// Wall-clock inference over a split. Reported, never asserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub num_parameters: u64,
    pub cases: usize,
    pub elapsed: Duration,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: {} cases in {} (mm:ss), {} parameters ({})",
            self.model,
            self.cases,
            fmt_mm_ss(self.elapsed),
            self.num_parameters,
            fmt_param_count(self.num_parameters)
        )
    }
}

/// Sequential prediction of every case; loading is not timed.
pub fn bench_cases(predictor: &ModelPredictor, cases: &[CaseRecord]) -> Result<BenchReport> {
    if cases.is_empty() {
        return Err(RunnerError::Empty("no cases to benchmark".into()));
    }
    let start = Instant::now();
    for c in cases {
        predict_case(predictor, c)?;
    }
    let model = predictor.model();
    Ok(BenchReport {
        model: model.config().display_name(),
        num_parameters: model.num_parameters() as u64,
        cases: cases.len(),
        elapsed: start.elapsed(),
    })
}

pub fn bench_inference(ck: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<BenchReport> {
    let cases = load_split(manifest, split, ck.config.num_classes(), &ck.config.preprocess)?;
    bench_cases(&ModelPredictor::from_checkpoint(ck)?, &cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lesionbench_core::sampling::{PatchSpec, Sampler};
    use lesionbench_core::synthgen::{generate_case, SynthConfig};
    use lesionbench_nn::{build_model, Arch, ModelConfig};

    #[test]
    fn reports_time_and_stable_parameter_count() {
        let synth = SynthConfig {
            volume_shape: [8, 8, 8],
            spacing: [1.0; 3],
            lesion_count_range: [1, 1],
            lesion_volume_range_mm3: [10.0, 20.0],
            lesion_volume_median_mm3: 15.0,
            ..SynthConfig::default()
        };
        let cases: Vec<_> = (0..2).map(|i| generate_case(&synth, i).unwrap()).collect();
        let cfg = ModelConfig {
            base_width: 2,
            depth: 2,
            ..ModelConfig::new(Arch::VNet)
        };
        let run = || {
            let p = ModelPredictor::new(build_model(&cfg, 0).unwrap(), Sampler::ThreeDim, PatchSpec::default());
            bench_cases(&p, &cases).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.num_parameters, b.num_parameters);
        assert_eq!(a.cases, 2);
        let s = a.summary();
        assert!(s.contains("mm:ss") && s.contains(&a.num_parameters.to_string()), "{s}");
        assert_eq!(fmt_mm_ss(a.elapsed).len(), 5);
    }
}
