use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Learning rate, step counter and per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub kind: OptimizerKind,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Self {
            lr,
            kind,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::default(), lr)
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Length of the first-moment buffer of parameter `i`, if it has one.
    pub fn moment_len(&self, i: usize) -> Option<usize> {
        self.moments.get(i).and_then(|m| m.as_ref()).map(|(m, v)| {
            debug_assert_eq!(m.len(), v.len());
            m.len()
        })
    }

    /// Applies one update to every non-frozen parameter, then clears all gradients.
    /// Returns the number of scalars that were updated.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<usize> {
        for p in store.params_mut().iter().filter(|p| !p.frozen) {
            if p.value.grad.is_none() {
                return Err(Error::Contract(format!(
                    "tunable parameter `{}` has no gradient",
                    p.name
                )));
            }
        }
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step as f64;
        let mut updated = 0;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let grad = p.value.grad.take();
            if p.frozen {
                continue;
            }
            let grad = grad.expect("checked above");
            updated += grad.len();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self.moments[i]
                        .get_or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grad[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(updated)
    }
}
