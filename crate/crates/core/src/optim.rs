//! Optimizers and learning-rate schedules.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd { .. } => "sgd",
        }
    }
}

/// Per-parameter optimizer state in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Adam first moments, or SGD velocities.
    pub m: Vec<Tensor>,
    /// Adam second moments; empty for SGD.
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let v = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            step: 0,
            m: zeros(),
            v,
        }
    }

    /// One update of every parameter in `params` with matching `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((pi, &gi), (mi, vi)) in it {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *pi -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut());
                    for ((pi, &gi), bi) in it {
                        *bi = momentum * *bi + gi;
                        *pi -= lr * *bi;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `min + (init − min)(1 + cos(π e / E)) / 2` with `min = min_factor · init`.
    Cosine { initial: f64, min_factor: f64, epochs: usize },
    /// `init · gamma^⌊e / step⌋`.
    Step { initial: f64, step: usize, gamma: f64 },
    Constant { lr: f64 },
}

impl Schedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        match *self {
            Schedule::Cosine {
                initial,
                min_factor,
                epochs,
            } => {
                let min = initial * min_factor;
                let frac = epoch.min(epochs) as f64 / epochs.max(1) as f64;
                min + 0.5 * (initial - min) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            Schedule::Step { initial, step, gamma } => initial * gamma.powi((epoch / step.max(1)) as i32),
            Schedule::Constant { lr } => lr,
        }
    }
}
