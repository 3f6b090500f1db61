//! Voxelwise evaluation: confusion counts, hard dice, precision and
//! sensitivity; BraTS region merging; per-diagnosis aggregation.

use std::collections::BTreeMap;

use ndarray::{ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BrainMask, Diagnosis, LabelVolume};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion<D: Dimension>(pred: ArrayView<'_, bool, D>, truth: ArrayView<'_, bool, D>) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(&pred).and(&truth).for_each(|&p, &t| match (p, t) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`; empty prediction against empty truth scores 1.
pub fn hard_dice(c: &ConfusionCounts) -> Option<f64> {
    let den = 2 * c.tp + c.fp + c.fn_;
    Some(if den == 0 { 1.0 } else { 2.0 * c.tp as f64 / den as f64 })
}

/// `tp / (tp + fp)`, undefined for an empty prediction.
pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp + c.fp;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

/// `tp / (tp + fn)`, undefined for an empty truth.
pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp + c.fn_;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

/// The three BraTS evaluation regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BratsRegions {
    pub whole: BrainMask,
    pub core: BrainMask,
    pub enhancing: BrainMask,
}

/// whole = {1,2,3,4}, core = {1,3,4}, enhancing = {4}.
pub fn merge_brats_classes(label: &LabelVolume) -> Result<BratsRegions> {
    if let Some(&v) = label.data().iter().find(|&&v| v > 4) {
        return Err(Error::LabelOutOfRange {
            value: v as u32,
            num_classes: 5,
        });
    }
    let d = label.data();
    Ok(BratsRegions {
        whole: d.mapv(|v| v != 0),
        core: d.mapv(|v| matches!(v, 1 | 3 | 4)),
        enhancing: d.mapv(|v| v == 4),
    })
}

/// Dice, precision and sensitivity of one region; `None` means undefined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
}

impl Metrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        Metrics {
            dice: hard_dice(c),
            precision: precision(c),
            sensitivity: sensitivity(c),
        }
    }

    pub fn get(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Dice => self.dice,
            MetricKind::Sensitivity => self.sensitivity,
            MetricKind::Precision => self.precision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Dice,
    Sensitivity,
    Precision,
}

impl MetricKind {
    /// Order of the per-type report blocks.
    pub const REPORT_ORDER: [MetricKind; 3] = [MetricKind::Dice, MetricKind::Sensitivity, MetricKind::Precision];

    pub fn heading(self) -> &'static str {
        match self {
            MetricKind::Dice => "DICE",
            MetricKind::Sensitivity => "SENSITIVITY",
            MetricKind::Precision => "PRECISION",
        }
    }
}

/// Names of the evaluated regions for a label space.
pub fn region_names(num_classes: u8) -> Vec<String> {
    if num_classes == 5 {
        vec!["whole".into(), "core".into(), "enhancing".into()]
    } else {
        vec!["lesion".into()]
    }
}

/// Metrics of a predicted label map against the truth. Five-class label
/// spaces are scored on the merged BraTS regions; anything else is scored
/// as lesion (nonzero) against background.
pub fn evaluate_case(pred: &LabelVolume, truth: &LabelVolume) -> Result<Vec<Metrics>> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if truth.num_classes() == 5 {
        let p = merge_brats_classes(pred)?;
        let t = merge_brats_classes(truth)?;
        [(&p.whole, &t.whole), (&p.core, &t.core), (&p.enhancing, &t.enhancing)]
            .into_iter()
            .map(|(a, b)| Ok(Metrics::from_counts(&confusion(a.view(), b.view())?)))
            .collect()
    } else {
        let p = pred.data().mapv(|v| v != 0);
        let t = truth.data().mapv(|v| v != 0);
        Ok(vec![Metrics::from_counts(&confusion(p.view(), t.view())?)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub diagnosis: Diagnosis,
    /// One entry per evaluated region.
    pub metrics: Vec<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub diagnosis: Diagnosis,
    pub cases: usize,
    pub metrics: Vec<Metrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub num_parameters: u64,
    pub sampler: String,
    pub loss: String,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub regions: Vec<String>,
    pub cases: Vec<CaseRow>,
    /// Present diagnosis groups in vocabulary order.
    pub groups: Vec<GroupRow>,
    /// Case-weighted means over all cases.
    pub overall: Vec<Metrics>,
}

/// Row order of the per-type tables; `Synthetic` appears only when present.
pub const SUPPLEMENTARY_ORDER: [Diagnosis; 7] = [
    Diagnosis::Metastasis,
    Diagnosis::Meningioma,
    Diagnosis::Schwannoma,
    Diagnosis::Pituitary,
    Diagnosis::Avm,
    Diagnosis::Other,
    Diagnosis::Synthetic,
];

fn mean_metrics<'a>(rows: impl Iterator<Item = &'a CaseRow> + Clone, regions: usize) -> Vec<Metrics> {
    let mean = |f: &dyn Fn(&Metrics) -> Option<f64>, r: usize| {
        let vals: Vec<f64> = rows.clone().filter_map(|c| f(&c.metrics[r])).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    (0..regions)
        .map(|r| Metrics {
            dice: mean(&|m| m.dice, r),
            precision: mean(&|m| m.precision, r),
            sensitivity: mean(&|m| m.sensitivity, r),
        })
        .collect()
}

/// Unweighted means per diagnosis and over all cases; undefined values are
/// skipped metric by metric.
pub fn aggregate(cases: Vec<CaseRow>, regions: Vec<String>, meta: ReportMeta) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero cases".into()));
    }
    if let Some(c) = cases.iter().find(|c| c.metrics.len() != regions.len()) {
        return Err(Error::ShapeMismatch(format!(
            "case {} has {} regions, expected {}",
            c.case_id,
            c.metrics.len(),
            regions.len()
        )));
    }
    let mut by_group: BTreeMap<Diagnosis, Vec<&CaseRow>> = BTreeMap::new();
    for c in &cases {
        by_group.entry(c.diagnosis).or_default().push(c);
    }
    let groups = by_group
        .into_iter()
        .map(|(diagnosis, rows)| GroupRow {
            diagnosis,
            cases: rows.len(),
            metrics: mean_metrics(rows.iter().copied(), regions.len()),
        })
        .collect();
    let overall = mean_metrics(cases.iter(), regions.len());
    Ok(EvalReport {
        meta,
        regions,
        cases,
        groups,
        overall,
    })
}

impl EvalReport {
    pub fn group(&self, d: Diagnosis) -> Option<&GroupRow> {
        self.groups.iter().find(|g| g.diagnosis == d)
    }

    /// `(row label, value)` pairs of one per-type table for `region`, ending
    /// with `Total`.
    pub fn supplementary_rows(&self, kind: MetricKind, region: usize) -> Vec<(String, Option<f64>)> {
        let mut rows = Vec::new();
        for d in SUPPLEMENTARY_ORDER {
            let group = self.group(d);
            if d == Diagnosis::Synthetic && group.is_none() {
                continue;
            }
            rows.push((
                d.display_name().to_string(),
                group.and_then(|g| g.metrics[region].get(kind)),
            ));
        }
        rows.push(("Total".to_string(), self.overall[region].get(kind)));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};
    use proptest::prelude::*;

    fn mask(n: usize, on: &[usize]) -> Array1<bool> {
        let mut m = Array1::from_elem(n, false);
        for &i in on {
            m[i] = true;
        }
        m
    }

    #[test]
    fn confusion_examples() {
        let a = mask(100, &[1, 2, 3, 4, 5]);
        let c = confusion(a.view(), a.view()).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 0, 0, 95));
        let p = mask(100, &[0, 1, 2, 3]);
        let t = mask(100, &[10, 11, 12, 13, 14, 15]);
        let c = confusion(p.view(), t.view()).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 4, 6, 90));
        let e = mask(10, &[]);
        let c = confusion(e.view(), e.view()).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 0));
        assert!(confusion(e.view(), mask(9, &[]).view()).is_err());
    }

    #[test]
    fn metric_arithmetic() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 3, tn: 10 };
        assert_eq!(hard_dice(&c), Some(0.6));
        assert_eq!(precision(&c), Some(0.75));
        assert_eq!(sensitivity(&c), Some(0.5));
        let same = ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 2 };
        assert_eq!(Metrics::from_counts(&same), Metrics { dice: Some(1.0), precision: Some(1.0), sensitivity: Some(1.0) });
        let miss = ConfusionCounts { tp: 0, fp: 0, fn_: 7, tn: 2 };
        assert_eq!(hard_dice(&miss), Some(0.0));
        assert_eq!(sensitivity(&miss), Some(0.0));
        assert_eq!(precision(&miss), None);
        let empty = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 };
        assert_eq!(hard_dice(&empty), Some(1.0));
    }

    #[test]
    fn brats_merge_membership() {
        let data = Array3::from_shape_vec((1, 1, 5), vec![0u8, 1, 2, 3, 4]).unwrap();
        let r = merge_brats_classes(&LabelVolume::new(data, 5).unwrap()).unwrap();
        let row = |m: &BrainMask| m.iter().copied().collect::<Vec<_>>();
        assert_eq!(row(&r.whole), vec![false, true, true, true, true]);
        assert_eq!(row(&r.core), vec![false, true, false, true, true]);
        assert_eq!(row(&r.enhancing), vec![false, false, false, false, true]);
        let bad = LabelVolume::new(Array3::from_elem((1, 1, 1), 5u8), 6).unwrap();
        assert!(merge_brats_classes(&bad).is_err());
    }

    fn row(id: &str, d: Diagnosis, dice: f64) -> CaseRow {
        CaseRow {
            case_id: id.into(),
            diagnosis: d,
            metrics: vec![Metrics { dice: Some(dice), precision: None, sensitivity: Some(dice) }],
        }
    }

    #[test]
    fn aggregation_is_case_weighted() {
        let cases = vec![
            row("a", Diagnosis::Meningioma, 0.4),
            row("b", Diagnosis::Meningioma, 0.8),
        ];
        let r = aggregate(cases, vec!["lesion".into()], ReportMeta::default()).unwrap();
        assert!((r.group(Diagnosis::Meningioma).unwrap().metrics[0].dice.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(r.overall[0].precision, None);

        let cases = vec![
            row("a", Diagnosis::Avm, 1.0),
            row("b", Diagnosis::Pituitary, 0.0),
            row("c", Diagnosis::Pituitary, 0.0),
            row("d", Diagnosis::Pituitary, 0.0),
        ];
        let r = aggregate(cases, vec!["lesion".into()], ReportMeta::default()).unwrap();
        assert_eq!(r.overall[0].dice, Some(0.25));
    }

    #[test]
    fn supplementary_row_order() {
        let cases = vec![row("a", Diagnosis::Schwannoma, 0.7), row("b", Diagnosis::Metastasis, 0.5)];
        let r = aggregate(cases, vec!["lesion".into()], ReportMeta::default()).unwrap();
        let labels: Vec<_> = r.supplementary_rows(MetricKind::Dice, 0).into_iter().map(|(l, _)| l).collect();
        assert_eq!(
            labels,
            ["Metastasis", "Meningioma", "Schwannoma", "Pituitary", "AVM", "Other tumors", "Total"]
        );
        assert!(aggregate(vec![], vec![], ReportMeta::default()).is_err());
    }

    proptest! {
        #[test]
        fn dice_matches_set_arithmetic_and_harmonic_mean(
            bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200)
        ) {
            let p = Array1::from_iter(bits.iter().map(|b| b.0));
            let t = Array1::from_iter(bits.iter().map(|b| b.1));
            let c = confusion(p.view(), t.view()).unwrap();
            let inter = bits.iter().filter(|b| b.0 && b.1).count() as f64;
            let np = bits.iter().filter(|b| b.0).count() as f64;
            let nt = bits.iter().filter(|b| b.1).count() as f64;
            let expected = if np + nt == 0.0 { 1.0 } else { 2.0 * inter / (np + nt) };
            prop_assert_eq!(hard_dice(&c), Some(expected));
            if let (Some(pr), Some(se)) = (precision(&c), sensitivity(&c)) {
                if pr > 0.0 && se > 0.0 {
                    prop_assert!((2.0 * pr * se / (pr + se) - expected).abs() < 1e-12);
                }
            }
            // reversing both masks changes nothing
            let pr = Array1::from_iter(bits.iter().rev().map(|b| b.0));
            let tr = Array1::from_iter(bits.iter().rev().map(|b| b.1));
            prop_assert_eq!(confusion(pr.view(), tr.view()).unwrap(), c);
        }

        #[test]
        fn brats_regions_nest(vals in proptest::collection::vec(0u8..5, 27)) {
            let lab = LabelVolume::new(Array3::from_shape_vec((3, 3, 3), vals).unwrap(), 5).unwrap();
            let r = merge_brats_classes(&lab).unwrap();
            for ((e, c), w) in r.enhancing.iter().zip(r.core.iter()).zip(r.whole.iter()) {
                prop_assert!(!e | c);
                prop_assert!(!c | w);
            }
        }
    }
}
