use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = params.zeros_like().0;
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.0[i]);
            for j in 0..p.value.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                p.value[j] -= learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamStore::default();
        ps.add_param("w".into(), vec![2], vec![1.0, -1.0]);
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &ps);
        opt.step(&mut ps, &Grads(vec![vec![3.0, -0.5]]));
        assert!((ps.params[0].value[0] - 0.9).abs() < 1e-6);
        assert!((ps.params[0].value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamStore::default();
        ps.add_param("w".into(), vec![1], vec![5.0]);
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &ps);
        for _ in 0..500 {
            let w = ps.params[0].value[0];
            opt.step(&mut ps, &Grads(vec![vec![2.0 * (w - 2.0)]]));
        }
        assert!((ps.params[0].value[0] - 2.0).abs() < 1e-2);
    }
}
