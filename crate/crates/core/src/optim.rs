// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam / AdamW with constant or cosine learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam; weight decay, if any, is added to the gradient.
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the peak rate to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
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

impl OptimizerSpec {
    pub fn adam(lr: f64, schedule: Schedule) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            schedule,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            warmup_steps: 0,
            grad_clip: 0.0,
        }
    }

    pub fn adamw(lr: f64, schedule: Schedule, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::adam(lr, schedule)
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let field = |name: &str| format!("{section}.{name}");
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                field("lr"),
                format!("must be positive, got {}", self.lr),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(field("beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(field("beta2"), "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(field("eps"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(field("weight_decay"), "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config(field("grad_clip"), "must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate used at zero-based `step` of a `total_steps` run.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = total_steps.saturating_sub(self.warmup_steps).max(1);
                let t = (step - self.warmup_steps) as f64 / span as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

/// Per-parameter moment estimates and the step counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    total_steps: u64,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
    step: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, total_steps: u64, shapes: &[(usize, usize)]) -> Self {
        let zeros = || {
            shapes
                .iter()
                .map(|&(r, c)| DenseMatrix::zeros(r, c))
                .collect()
        };
        Self {
            spec,
            total_steps,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn current_lr(&self) -> f64 {
        self.spec.lr_at(self.step, self.total_steps)
    }

    /// Applies one update to `params` in place.
    pub fn update(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "optimizer",
                format!(
                    "{} moment slots, {} params, {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!(
                        "param {:?} grad {:?} moment {:?}",
                        p.shape(),
                        g.shape(),
                        m.shape()
                    ),
                ));
            }
        }
        let s = &self.spec;
        let lr = s.lr_at(self.step, self.total_steps);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);

        let clip_scale = if s.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > s.grad_clip {
                s.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let mut gk = g[k] * clip_scale;
                if s.kind == OptimizerKind::Adam {
                    gk += s.weight_decay * *w;
                }
                m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * gk;
                v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                if s.kind == OptimizerKind::AdamW {
                    *w -= lr * s.weight_decay * *w;
                }
                *w -= lr * m_hat / (v_hat.sqrt() + s.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = OptimizerSpec::adam(1e-3, Schedule::Cosine);
        assert_eq!(s.lr_at(0, 100), 1e-3);
        assert!((s.lr_at(50, 100) - 5e-4).abs() < 1e-15);
        assert!(s.lr_at(99, 100) < 1e-6);
        let c = OptimizerSpec::adam(1e-3, Schedule::Constant);
        assert_eq!(c.lr_at(99, 100), 1e-3);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let spec = OptimizerSpec::adam(0.1, Schedule::Constant);
        let mut opt = Optimizer::new(spec, 10, &[(1, 2)]);
        let mut w = DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let g = DenseMatrix::from_rows(&[vec![0.5, -2.0]]).unwrap();
        opt.update(&mut [&mut w], &[g]).unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) - -0.9).abs() < 1e-6);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn adamw_decays_with_zero_gradient() {
        let spec = OptimizerSpec::adamw(0.1, Schedule::Constant, 0.5);
        let mut opt = Optimizer::new(spec, 10, &[(1, 1)]);
        let mut w = DenseMatrix::scalar(2.0);
        opt.update(&mut [&mut w], &[DenseMatrix::scalar(0.0)])
            .unwrap();
        assert!((w.item().unwrap() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let spec = OptimizerSpec::adam(0.05, Schedule::Cosine);
        let mut opt = Optimizer::new(spec, 2000, &[(1, 3)]);
        let target = [1.0, -2.0, 0.5];
        let mut w = DenseMatrix::zeros(1, 3);
        for _ in 0..2000 {
            let g = DenseMatrix::from_fn(1, 3, |_, j| 2.0 * (w.get(0, j) - target[j]));
            opt.update(&mut [&mut w], &[g]).unwrap();
        }
        for j in 0..3 {
            assert!((w.get(0, j) - target[j]).abs() < 1e-3);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = Optimizer::new(OptimizerSpec::adam(0.1, Schedule::Constant), 1, &[(2, 2)]);
        let mut w = DenseMatrix::zeros(2, 2);
        assert!(opt
            .update(&mut [&mut w], &[DenseMatrix::zeros(1, 2)])
            .is_err());
    }
}
