use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistics per training step.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[c_out, c_in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    /// Uniform He initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn new<R: Rng>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in * k * k;
        let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { weight: Tensor::new(vec![c_out, c_in, k, k], w).unwrap(), bias: Tensor::zeros(&[c_out]) }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// `None` until the first training step.
    pub running: Option<RunningStats>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self { gamma: Tensor::full(&[c], 1.0), beta: Tensor::zeros(&[c]), running: None }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub(crate) fn forward_running(&self, tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let stats = self.running.as_ref().ok_or_else(|| {
            Error::InvalidState("batchnorm running statistics requested before any training step".into())
        })?;
        tape.batchnorm_fixed(x, gamma, beta, &stats.mean, &stats.var, BN_EPS)
    }

    /// Folds one batch's statistics into the running estimate. The first call
    /// adopts the batch statistics directly.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        match self.running.as_mut() {
            None => self.running = Some(RunningStats { mean: mean.to_vec(), var: var.to_vec() }),
            Some(r) => {
                for (rm, m) in r.mean.iter_mut().zip(mean) {
                    *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * m;
                }
                for (rv, v) in r.var.iter_mut().zip(var) {
                    *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * v;
                }
            }
        }
    }
}
