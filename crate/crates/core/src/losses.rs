//! Training objectives for class-imbalanced segmentation, with analytic
//! gradients with respect to the class probabilities.
//!
//! Probabilities are laid out `(N, K, V)`: batch, class, flattened voxels,
//! i.e. the memory order of an `(N, K, D, H, W)` network output. Labels are
//! `(N, V)`. Cross-entropy terms are averaged over all `N·V` voxels; soft
//! dice sums over the whole batch.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-7;
/// Floor for zero-count class ratios before renormalisation.
pub const RATIO_FLOOR: f64 = 1e-7;
/// Per-voxel tolerance on `Σ_c p_c = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    WeightedCe,
    SoftDice,
    CeMinusLogDice,
}

impl LossKind {
    pub fn key(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::WeightedCe => "weighted_ce",
            LossKind::SoftDice => "soft_dice",
            LossKind::CeMinusLogDice => "ce_minus_log_dice",
        }
    }

    /// Whether the objective uses inverse-frequency class weights.
    pub fn is_weighted(self) -> bool {
        matches!(self, LossKind::WeightedCe | LossKind::CeMinusLogDice)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiceVariant {
    /// Squared cardinalities in the denominator.
    D1,
    /// Plain sums in the denominator.
    D2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioScope {
    Dataset,
    Volume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub dice_variant: DiceVariant,
    pub smooth_eps: f64,
    pub ratio_scope: RatioScope,
    /// Fixed class ratios; computed from the training split when absent.
    pub class_ratios: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::CeMinusLogDice,
            dice_variant: DiceVariant::D2,
            smooth_eps: 1e-5,
            ratio_scope: RatioScope::Dataset,
            class_ratios: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_eps > 0.0) {
            return Err(Error::InvalidArgument("smooth_eps must be positive".into()));
        }
        if let Some(r) = &self.class_ratios {
            check_ratios(r)?;
        }
        Ok(())
    }
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "class ratios {ratios:?} must all be positive"
        )));
    }
    Ok(())
}

/// Shape descriptor for a flat `(N, K, V)` probability buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbLayout {
    pub batch: usize,
    pub classes: usize,
    pub voxels: usize,
}

impl ProbLayout {
    pub fn new(batch: usize, classes: usize, voxels: usize) -> Self {
        ProbLayout {
            batch,
            classes,
            voxels,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.classes * self.voxels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn at(&self, b: usize, c: usize, v: usize) -> usize {
        (b * self.classes + c) * self.voxels + v
    }

    fn check(&self, probs: &[f64], labels: &[u8]) -> Result<()> {
        if probs.len() != self.len() || labels.len() != self.batch * self.voxels {
            return Err(Error::ShapeMismatch(format!(
                "probs {} / labels {} for layout {self:?}",
                probs.len(),
                labels.len()
            )));
        }
        if self.is_empty() {
            return Err(Error::ShapeMismatch("empty probability map".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::LabelOutOfRange {
                value: l as u32,
                num_classes: self.classes as u8,
            });
        }
        Ok(())
    }

    fn check_normalized(&self, probs: &[f64]) -> Result<()> {
        for b in 0..self.batch {
            for v in 0..self.voxels {
                let sum: f64 = (0..self.classes).map(|c| probs[self.at(b, c, v)]).sum();
                if (sum - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(Error::NotNormalized {
                        voxel: b * self.voxels + v,
                        sum,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Class frequencies over one or more label arrays; zero-count classes are
/// floored at [`RATIO_FLOOR`] and the vector renormalised.
pub fn compute_class_ratios<'a, I>(labels: I, num_classes: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for volume in labels {
        for &l in volume {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::LabelOutOfRange {
                    value: l as u32,
                    num_classes: num_classes as u8,
                });
            }
            counts[l] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyRegion);
    }
    let mut ratios: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / total as f64).max(RATIO_FLOOR))
        .collect();
    let sum: f64 = ratios.iter().sum();
    ratios.iter_mut().for_each(|r| *r /= sum);
    Ok(ratios)
}

/// Loss value and its gradient with respect to the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn cross_entropy_inner(probs: &[f64], labels: &[u8], layout: ProbLayout, weights: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = (layout.batch * layout.voxels) as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for b in 0..layout.batch {
        for v in 0..layout.voxels {
            let c = labels[b * layout.voxels + v] as usize;
            let idx = layout.at(b, c, v);
            let p = probs[idx];
            let pc = p.clamp(PROB_FLOOR, 1.0);
            total -= pc.ln() * weights[c];
            if let Some(g) = grad.as_deref_mut() {
                if p >= PROB_FLOOR {
                    g[idx] -= weights[c] / (pc * n);
                }
            }
        }
    }
    total / n
}

/// Mean over voxels of `−log(p_true) / r_true`.
pub fn weighted_cross_entropy(probs: &[f64], labels: &[u8], layout: ProbLayout, ratios: &[f64]) -> Result<f64> {
    Ok(weighted_cross_entropy_grad(probs, labels, layout, ratios)?.value)
}

pub fn weighted_cross_entropy_grad(probs: &[f64], labels: &[u8], layout: ProbLayout, ratios: &[f64]) -> Result<LossValue> {
    layout.check(probs, labels)?;
    layout.check_normalized(probs)?;
    if ratios.len() != layout.classes {
        return Err(Error::ShapeMismatch(format!(
            "{} ratios for {} classes",
            ratios.len(),
            layout.classes
        )));
    }
    check_ratios(ratios)?;
    let weights: Vec<f64> = ratios.iter().map(|r| 1.0 / r).collect();
    let mut grad = vec![0.0; probs.len()];
    let value = cross_entropy_inner(probs, labels, layout, &weights, Some(&mut grad));
    Ok(LossValue { value, grad })
}

/// Unweighted mean cross-entropy.
pub fn cross_entropy_grad(probs: &[f64], labels: &[u8], layout: ProbLayout) -> Result<LossValue> {
    layout.check(probs, labels)?;
    layout.check_normalized(probs)?;
    let weights = vec![1.0; layout.classes];
    let mut grad = vec![0.0; probs.len()];
    let value = cross_entropy_inner(probs, labels, layout, &weights, Some(&mut grad));
    Ok(LossValue { value, grad })
}

/// Smoothed soft dice averaged over foreground classes `1..K`, each taken
/// one-vs-rest. Returns the dice value (not a loss) and `∂D/∂p`.
pub fn soft_dice_grad(probs: &[f64], labels: &[u8], layout: ProbLayout, variant: DiceVariant, eps: f64) -> Result<LossValue> {
    layout.check(probs, labels)?;
    if layout.classes < 2 {
        return Err(Error::InvalidArgument("soft dice needs at least 2 classes".into()));
    }
    let fg = layout.classes - 1;
    let mut grad = vec![0.0; probs.len()];
    let mut mean = 0.0;
    for c in 1..layout.classes {
        let (mut inter, mut denom) = (0.0, 0.0);
        for b in 0..layout.batch {
            for v in 0..layout.voxels {
                let p = probs[layout.at(b, c, v)];
                let g = if labels[b * layout.voxels + v] as usize == c { 1.0 } else { 0.0 };
                inter += p * g;
                denom += match variant {
                    DiceVariant::D1 => p * p + g * g,
                    DiceVariant::D2 => p + g,
                };
            }
        }
        let num = 2.0 * inter + eps;
        let den = denom + eps;
        mean += num / den / fg as f64;
        for b in 0..layout.batch {
            for v in 0..layout.voxels {
                let idx = layout.at(b, c, v);
                let g = if labels[b * layout.voxels + v] as usize == c { 1.0 } else { 0.0 };
                let dden = match variant {
                    DiceVariant::D1 => 2.0 * probs[idx],
                    DiceVariant::D2 => 1.0,
                };
                grad[idx] = (2.0 * g * den - num * dden) / (den * den) / fg as f64;
            }
        }
    }
    Ok(LossValue { value: mean, grad })
}

pub fn soft_dice(probs: &[f64], labels: &[u8], layout: ProbLayout, variant: DiceVariant, eps: f64) -> Result<f64> {
    Ok(soft_dice_grad(probs, labels, layout, variant, eps)?.value)
}

/// Weighted cross-entropy minus the log of the soft dice.
pub fn ce_minus_log_dice_grad(
    probs: &[f64],
    labels: &[u8],
    layout: ProbLayout,
    ratios: &[f64],
    variant: DiceVariant,
    eps: f64,
) -> Result<LossValue> {
    let ce = weighted_cross_entropy_grad(probs, labels, layout, ratios)?;
    let dice = soft_dice_grad(probs, labels, layout, variant, eps)?;
    let inv = 1.0 / dice.value;
    let grad = ce
        .grad
        .iter()
        .zip(&dice.grad)
        .map(|(gc, gd)| gc - gd * inv)
        .collect();
    Ok(LossValue {
        value: ce.value - dice.value.ln(),
        grad,
    })
}

pub fn ce_minus_log_dice(
    probs: &[f64],
    labels: &[u8],
    layout: ProbLayout,
    ratios: &[f64],
    variant: DiceVariant,
    eps: f64,
) -> Result<f64> {
    Ok(ce_minus_log_dice_grad(probs, labels, layout, ratios, variant, eps)?.value)
}

/// Evaluate the configured objective. `ratios` are required by the weighted
/// kinds and ignored otherwise. `SoftDice` as an objective is `1 − D`.
pub fn evaluate(config: &LossConfig, probs: &[f64], labels: &[u8], layout: ProbLayout, ratios: &[f64]) -> Result<LossValue> {
    match config.kind {
        LossKind::CrossEntropy => cross_entropy_grad(probs, labels, layout),
        LossKind::WeightedCe => weighted_cross_entropy_grad(probs, labels, layout, ratios),
        LossKind::SoftDice => {
            layout.check_normalized(probs)?;
            let d = soft_dice_grad(probs, labels, layout, config.dice_variant, config.smooth_eps)?;
            Ok(LossValue {
                value: 1.0 - d.value,
                grad: d.grad.into_iter().map(|g| -g).collect(),
            })
        }
        LossKind::CeMinusLogDice => {
            ce_minus_log_dice_grad(probs, labels, layout, ratios, config.dice_variant, config.smooth_eps)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    const TOL: f64 = 1e-5;

    fn binary(p_fg: &[f64]) -> Vec<f64> {
        // layout (1, 2, V): background row then foreground row
        p_fg.iter().map(|p| 1.0 - p).chain(p_fg.iter().copied()).collect()
    }

    #[test]
    fn ratios_by_direct_count() {
        let mut v = vec![0u8; 10];
        v[3] = 1;
        let r = compute_class_ratios([v.as_slice()], 2).unwrap();
        assert!((r[0] - 0.9).abs() < 1e-12 && (r[1] - 0.1).abs() < 1e-12);
        let single = vec![0u8; 8];
        let r = compute_class_ratios([single.as_slice()], 3).unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r[1] > 0.0 && r[1] < 1e-6);
        assert!(compute_class_ratios(std::iter::empty::<&[u8]>(), 2).is_err());
    }

    #[test]
    fn ratios_pool_over_dataset() {
        let a = vec![0u8, 0, 0, 1];
        let b = vec![0u8, 0, 0, 0];
        let r = compute_class_ratios([a.as_slice(), b.as_slice()], 2).unwrap();
        assert!((r[1] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn imbalance_weight_ratio_between_regimes() {
        // inverse-frequency foreground weights for the two reported tumour fractions
        let brats: f64 = 0.0123;
        let ntuh = 0.00145;
        let ratio = (1.0 / ntuh) / (1.0 / brats);
        assert!((ratio - 8.4828).abs() < 1e-3);
    }

    #[test]
    fn wce_examples() {
        let layout = ProbLayout::new(1, 2, 1);
        let v = weighted_cross_entropy(&binary(&[0.5]), &[1], layout, &[0.9, 0.1]).unwrap();
        assert!((v - 6.931_471_805_599_453).abs() < TOL);
        let layout = ProbLayout::new(1, 2, 2);
        let v = weighted_cross_entropy(&binary(&[0.2, 0.2]), &[0, 0], layout, &[0.5, 0.5]).unwrap();
        assert!((v - 0.446_287_102_628_419_5).abs() < TOL);
        let v = weighted_cross_entropy(&binary(&[0.0, 1.0]), &[0, 1], layout, &[0.5, 0.5]).unwrap();
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn wce_errors() {
        let layout = ProbLayout::new(1, 2, 2);
        assert!(matches!(
            weighted_cross_entropy(&[0.5, 0.5, 0.6, 0.5], &[0, 1], layout, &[0.5, 0.5]),
            Err(Error::NotNormalized { voxel: 0, .. })
        ));
        assert!(matches!(
            weighted_cross_entropy(&[0.5, 0.5, 0.5], &[0, 1], layout, &[0.5, 0.5]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn dice_examples() {
        let layout = ProbLayout::new(1, 2, 2);
        let p = binary(&[0.5, 0.5]);
        let d2 = soft_dice(&p, &[1, 0], layout, DiceVariant::D2, 1e-12).unwrap();
        let d1 = soft_dice(&p, &[1, 0], layout, DiceVariant::D1, 1e-12).unwrap();
        assert!((d2 - 0.5).abs() < TOL);
        assert!((d1 - 2.0 / 3.0).abs() < TOL);
        let exact = binary(&[1.0, 0.0]);
        for var in [DiceVariant::D1, DiceVariant::D2] {
            assert!((soft_dice(&exact, &[1, 0], layout, var, 1e-5).unwrap() - 1.0).abs() < 1e-12);
            let empty = binary(&[0.0, 0.0]);
            assert_eq!(soft_dice(&empty, &[0, 0], layout, var, 1e-5).unwrap(), 1.0);
        }
    }

    #[test]
    fn composite_examples() {
        let layout = ProbLayout::new(1, 2, 2);
        let p = binary(&[0.5, 0.5]);
        let v = ce_minus_log_dice(&p, &[1, 0], layout, &[0.5, 0.5], DiceVariant::D2, 1e-12).unwrap();
        assert!((v - 2.079_441_541_679_835_7).abs() < TOL);
        let perfect = binary(&[1.0, 0.0]);
        let v = ce_minus_log_dice(&perfect, &[1, 0], layout, &[0.5, 0.5], DiceVariant::D2, 1e-5).unwrap();
        assert!(v.abs() < 1e-5);
        // all-background prediction stays finite
        let bg = binary(&[0.0, 0.0]);
        let v = ce_minus_log_dice(&bg, &[1, 0], layout, &[0.5, 0.5], DiceVariant::D2, 1e-5).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn multiclass_dice_excludes_background() {
        let layout = ProbLayout::new(1, 3, 2);
        // voxel 0 class 1, voxel 1 class 2; perfect one-hot prediction
        let p = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let d = soft_dice(&p, &[1, 2], layout, DiceVariant::D2, 1e-5).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // class 2 predicted as class 1: dice_1 = 2*1/(2+1), dice_2 = eps/(1+eps)
        let p = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let d = soft_dice(&p, &[1, 2], layout, DiceVariant::D2, 1e-12).unwrap();
        assert!((d - (2.0 / 3.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn d1_equals_d2_for_binary_predictions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let fg: Vec<f64> = (0..30).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let labels: Vec<u8> = (0..30).map(|_| rng.random_bool(0.3) as u8).collect();
            let layout = ProbLayout::new(1, 2, 30);
            let p = binary(&fg);
            let d1 = soft_dice(&p, &labels, layout, DiceVariant::D1, 1e-5).unwrap();
            let d2 = soft_dice(&p, &labels, layout, DiceVariant::D2, 1e-5).unwrap();
            assert_eq!(d1, d2);
            // symmetric under swapping prediction and truth
            let swapped: Vec<u8> = fg.iter().map(|&v| v as u8).collect();
            let p2 = binary(&labels.iter().map(|&l| l as f64).collect::<Vec<_>>());
            let back = soft_dice(&p2, &swapped, layout, DiceVariant::D2, 1e-5).unwrap();
            assert!((back - d2).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_ratio_wce_is_scaled_ce() {
        let layout = ProbLayout::new(2, 3, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut probs = vec![0.0; layout.len()];
        for b in 0..2 {
            for v in 0..5 {
                let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for c in 0..3 {
                    probs[(b * 3 + c) * 5 + v] = raw[c] / s;
                }
            }
        }
        let labels: Vec<u8> = (0..10).map(|i| (i % 3) as u8).collect();
        let w = weighted_cross_entropy(&probs, &labels, layout, &[1.0 / 3.0; 3]).unwrap();
        let ce = cross_entropy_grad(&probs, &labels, layout).unwrap().value;
        assert!((w / 3.0 - ce).abs() < 1e-12);
    }

    fn softmax(logits: &[f64], layout: ProbLayout) -> Vec<f64> {
        let mut out = vec![0.0; logits.len()];
        for b in 0..layout.batch {
            for v in 0..layout.voxels {
                let m = (0..layout.classes)
                    .map(|c| logits[layout.at(b, c, v)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..layout.classes).map(|c| (logits[layout.at(b, c, v)] - m).exp()).sum();
                for c in 0..layout.classes {
                    out[layout.at(b, c, v)] = (logits[layout.at(b, c, v)] - m).exp() / s;
                }
            }
        }
        out
    }

    fn softmax_backward(probs: &[f64], grad_p: &[f64], layout: ProbLayout) -> Vec<f64> {
        let mut out = vec![0.0; probs.len()];
        for b in 0..layout.batch {
            for v in 0..layout.voxels {
                let dot: f64 = (0..layout.classes)
                    .map(|c| probs[layout.at(b, c, v)] * grad_p[layout.at(b, c, v)])
                    .sum();
                for c in 0..layout.classes {
                    let i = layout.at(b, c, v);
                    out[i] = probs[i] * (grad_p[i] - dot);
                }
            }
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences_through_softmax() {
        let layout = ProbLayout::new(1, 2, 64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let logits: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..64).map(|_| rng.random_bool(0.2) as u8).collect();
        let ratios = compute_class_ratios([labels.as_slice()], 2).unwrap();
        for kind in [LossKind::CrossEntropy, LossKind::WeightedCe, LossKind::SoftDice, LossKind::CeMinusLogDice] {
            for variant in [DiceVariant::D1, DiceVariant::D2] {
                let cfg = LossConfig {
                    kind,
                    dice_variant: variant,
                    ..LossConfig::default()
                };
                let f = |z: &[f64]| evaluate(&cfg, &softmax(z, layout), &labels, layout, &ratios).unwrap();
                let base = f(&logits);
                let analytic = softmax_backward(&softmax(&logits, layout), &base.grad, layout);
                let h = 1e-6;
                for i in (0..logits.len()).step_by(5) {
                    let mut up = logits.clone();
                    up[i] += h;
                    let mut dn = logits.clone();
                    dn[i] -= h;
                    let numeric = (f(&up).value - f(&dn).value) / (2.0 * h);
                    let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (analytic[i] - numeric).abs() / scale < 1e-4,
                        "{kind:?}/{variant:?} logit {i}: analytic {} numeric {numeric}",
                        analytic[i]
                    );
                }
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_finite() {
        let layout = ProbLayout::new(1, 2, 3);
        let p = binary(&[0.0, 1.0, 0.3]);
        let labels = [1u8, 0, 1];
        for kind in [LossKind::CrossEntropy, LossKind::WeightedCe, LossKind::SoftDice, LossKind::CeMinusLogDice] {
            let cfg = LossConfig { kind, ..LossConfig::default() };
            let v = evaluate(&cfg, &p, &labels, layout, &[0.5, 0.5]).unwrap();
            assert!(v.value.is_finite() && v.value >= 0.0);
            assert!(v.grad.iter().all(|g| g.is_finite()));
        }
    }
}
