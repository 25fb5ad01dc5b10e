//! Adam with decoupled weight decay.
//!
//! Each step first shrinks every parameter by `1 - lr * weight_decay`, then
//! applies the bias-corrected adaptive-moment update.

use serde::{Deserialize, Serialize};

use super::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. `names` label parameters in error messages.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Gradients, names: &[String]) -> Result<()> {
        if params.len() != grads.0.len() {
            return Err(Error::DimensionMismatch {
                context: "optimizer parameter count",
                expected: params.len(),
                actual: grads.0.len(),
            });
        }
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("param{i}"));
        for (i, (p, g)) in params.iter().zip(&grads.0).enumerate() {
            if p.len() != g.len() {
                return Err(Error::DimensionMismatch {
                    context: "optimizer parameter shape",
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", name(i))));
            }
        }
        if self.m.is_empty() {
            self.m = grads.0.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.0.len() || self.m.iter().zip(&grads.0).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::DimensionMismatch {
                context: "optimizer moment shape",
                expected: self.m.len(),
                actual: grads.0.len(),
            });
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, (p, g)) in params.into_iter().zip(&grads.0).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {} after update", name(i))));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(params: &mut [f64], grad: &[f64], cfg: AdamWConfig, steps: usize) {
        let mut opt = AdamW::new(cfg);
        for _ in 0..steps {
            opt.step(vec![&mut *params], &Gradients(vec![grad.to_vec()]), &[]).unwrap();
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = [1.5, -2.0, 0.0];
        run(&mut p, &[0.0; 3], AdamWConfig::new(0.1, 0.0), 5);
        assert_eq!(p, [1.5, -2.0, 0.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let mut p = [0.0];
        let g = 3.7;
        run(&mut p, &[g], AdamWConfig::new(0.01, 0.0), 1);
        let expected = -0.01 * g / (g.abs() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let (lr, wd) = (0.05, 0.2);
        let mut p = [4.0];
        run(&mut p, &[0.0], AdamWConfig::new(lr, wd), 3);
        assert!((p[0] - 4.0 * (1.0 - lr * wd).powi(3)).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = [0.0, 0.0];
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        let err = opt
            .step(vec![&mut p], &Gradients(vec![vec![0.0, f64::NAN]]), &["gate.bias".into()])
            .unwrap_err();
        assert!(err.to_string().contains("gate.bias"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = [0.0, 0.0];
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        assert!(opt.step(vec![&mut p], &Gradients(vec![vec![0.0]]), &[]).is_err());
        assert!(opt.step(vec![&mut p], &Gradients(vec![]), &[]).is_err());
    }

    #[test]
    fn step_counter_increases() {
        let mut p = [0.0];
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        for k in 1..4 {
            opt.step(vec![&mut p], &Gradients(vec![vec![1.0]]), &[]).unwrap();
            assert_eq!(opt.steps_taken(), k);
        }
    }
}
