use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

pub type ParamId = usize;
pub type BufferId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Trainable parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub buffers: Vec<Param>,
}

impl ParamStore {
    pub fn add_param(&mut self, name: String, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param { name, shape, value });
        self.params.len() - 1
    }

    pub fn add_buffer(&mut self, name: String, shape: Vec<usize>, value: Vec<f64>) -> BufferId {
        self.buffers.push(Param { name, shape, value });
        self.buffers.len() - 1
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.params[id].value
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut [f64] {
        &mut self.buffers[id].value
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    /// Replace values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        fn check(a: &[Param], b: &[Param], what: &str) -> Result<()> {
            if a.len() != b.len() {
                return Err(NnError::Checkpoint(format!("{what} count {} != {}", b.len(), a.len())));
            }
            for (x, y) in a.iter().zip(b) {
                if x.name != y.name || x.shape != y.shape || y.value.len() != x.value.len() {
                    return Err(NnError::Checkpoint(format!(
                        "{what} {} {:?} does not match {} {:?}",
                        y.name, y.shape, x.name, x.shape
                    )));
                }
            }
            Ok(())
        }
        check(&self.params, &other.params, "parameter")?;
        check(&self.buffers, &other.buffers, "buffer")?;
        self.clone_from(other);
        Ok(())
    }
}

/// Gradients aligned with [`ParamStore::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }
}
