//! Central finite-difference check of parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a − n| / max(|a|, |n|, 1e-6)`.
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

/// Compare backprop against central differences at `samples` randomly chosen
/// scalars. `loss` maps output probabilities to `(value, ∂value/∂probs)`.
/// The training-mode pass uses `seed` for every evaluation so dropout masks
/// stay fixed.
pub fn check_gradients(
    model: &Model,
    x: &Tensor,
    seed: u64,
    samples: usize,
    step: f64,
    loss: impl Fn(&Tensor) -> (f64, Tensor),
) -> Result<Vec<GradSample>> {
    let tape = model.forward_train(x.clone(), seed)?;
    let (_, g) = loss(tape.output());
    let grads = model.backward(&tape, g)?;

    let sizes: Vec<usize> = model.params().params.iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut probe = model.clone();
    let eval = |m: &Model| -> Result<f64> { Ok(loss(m.forward_train(x.clone(), seed)?.output()).0) };
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut param = 0;
        while flat >= sizes[param] {
            flat -= sizes[param];
            param += 1;
        }
        let orig = probe.params().params[param].value[flat];
        probe.params_mut().params[param].value[flat] = orig + step;
        let up = eval(&probe)?;
        probe.params_mut().params[param].value[flat] = orig - step;
        let down = eval(&probe)?;
        probe.params_mut().params[param].value[flat] = orig;
        out.push(GradSample {
            param,
            index: flat,
            analytic: grads.get(param)[flat],
            numeric: (up - down) / (2.0 * step),
        });
    }
    Ok(out)
}
