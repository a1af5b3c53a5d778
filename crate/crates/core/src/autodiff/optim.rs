use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning-rate multiplier over a run of `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from 1 at step 1 down to 0 after the last step.
    Cosine,
}

impl LrDecay {
    /// Multiplier for the 1-based `step`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => {
                let frac = (step.saturating_sub(1)) as f64 / total.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps_stab: f64,
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

impl OptimizerHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_stab: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub hyper: OptimizerHyper,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, hyper: OptimizerHyper, param_count: usize) -> Self {
        let n = if kind == OptimizerKind::Adam { param_count } else { 0 };
        Self {
            kind,
            step_count: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            hyper,
        }
    }

    pub fn sgd(lr: f64, param_count: usize) -> Self {
        Self::new(OptimizerKind::Sgd, OptimizerHyper::with_lr(lr), param_count)
    }

    pub fn adam(lr: f64, param_count: usize) -> Self {
        Self::new(OptimizerKind::Adam, OptimizerHyper::with_lr(lr), param_count)
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                context: format!("gradient entry {i}"),
                step: self.step_count as usize,
            });
        }
        self.step_count += 1;
        let lr = self.hyper.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::Dimension(format!(
                        "optimizer sized for {} parameters, got {}",
                        self.first_moment.len(),
                        params.len()
                    )));
                }
                let OptimizerHyper {
                    beta1, beta2, eps_stab, ..
                } = self.hyper;
                let k = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(k);
                let bc2 = 1.0 - beta2.powi(k);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps_stab);
                }
            }
        }
        Ok(())
    }
}
