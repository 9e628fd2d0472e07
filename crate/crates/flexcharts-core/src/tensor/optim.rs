//! Gradient-descent optimizers, cosine schedule, and gradient clipping.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Update rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    MomentumSgd,
    AdaptiveMoments,
}

/// Per-parameter moment buffers, keyed by the parameter's registry name.
/// `first` is the momentum / first-moment buffer; `second` is the second
/// moment (adaptive-moments only, empty for SGD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBufs {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Momentum coefficient (SGD) or beta1 (adaptive moments).
    pub beta1: f64,
    /// beta2 for adaptive moments; unused for SGD.
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub step_count: u64,
    bufs: BTreeMap<String, MomentBufs>,
}

impl Optimizer {
    pub fn momentum_sgd(lr: f64, momentum: f64, weight_decay: f64) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::MomentumSgd,
            lr,
            beta1: momentum,
            beta2: 0.0,
            weight_decay,
            eps: 0.0,
            step_count: 0,
            bufs: BTreeMap::new(),
        }
    }

    pub fn adaptive_moments(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::AdaptiveMoments,
            lr,
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            step_count: 0,
            bufs: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update to every named parameter. Every parameter must
    /// carry a gradient; moment buffers are created lazily and must match
    /// the parameter shape afterwards.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for (name, param) in params {
            let grad = param.grad().ok_or_else(|| {
                Error::InvalidArg(format!("optimizer step: parameter '{name}' has no gradient"))
            })?;
            let n = param.numel();
            if grad.len() != n {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("parameter '{name}' has {n} elements but gradient has {}", grad.len()),
                ));
            }
            let bufs = self.bufs.entry(name.clone()).or_insert_with(|| MomentBufs {
                first: vec![0.0; n],
                second: if self.kind == OptimizerKind::AdaptiveMoments {
                    vec![0.0; n]
                } else {
                    Vec::new()
                },
            });
            if bufs.first.len() != n {
                return Err(Error::shape(
                    "optimizer_step",
                    format!(
                        "moment buffer for '{name}' has {} elements but parameter has {n}; \
                         was a resize event applied without re-keying?",
                        bufs.first.len()
                    ),
                ));
            }
            let mut data = param.data_mut();
            match self.kind {
                OptimizerKind::MomentumSgd => {
                    for i in 0..n {
                        let g = grad[i] + self.weight_decay * data[i];
                        bufs.first[i] = self.beta1 * bufs.first[i] + g;
                        data[i] -= self.lr * bufs.first[i];
                    }
                }
                OptimizerKind::AdaptiveMoments => {
                    let bc1 = 1.0 - self.beta1.powi(t as i32);
                    let bc2 = 1.0 - self.beta2.powi(t as i32);
                    for i in 0..n {
                        let g = grad[i] + self.weight_decay * data[i];
                        bufs.first[i] = self.beta1 * bufs.first[i] + (1.0 - self.beta1) * g;
                        bufs.second[i] = self.beta2 * bufs.second[i] + (1.0 - self.beta2) * g * g;
                        let m_hat = bufs.first[i] / bc1;
                        let v_hat = bufs.second[i] / bc2;
                        data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<&MomentBufs> {
        self.bufs.get(name)
    }

    pub fn moments_mut(&mut self, name: &str) -> Option<&mut MomentBufs> {
        self.bufs.get_mut(name)
    }

    pub fn set_moments(&mut self, name: String, bufs: MomentBufs) {
        self.bufs.insert(name, bufs);
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &String> {
        self.bufs.keys()
    }
}

/// Cosine annealing from `lr0` at step 0 down to exactly 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales all gradients by max_norm / ||g|| when the joint L2 norm
/// exceeds max_norm. Returns the pre-clip norm.
pub fn clip_grad_norm(params: &[(String, Tensor)], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (name, p) in params {
        let g = p.grad().ok_or_else(|| {
            Error::InvalidArg(format!("clip_grad_norm: parameter '{name}' has no gradient"))
        })?;
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, p) in params {
            p.with_grad_mut(|g| {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            });
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(t: Tensor) -> Vec<(String, Tensor)> {
        vec![("p".to_string(), t)]
    }

    #[test]
    fn plain_sgd_step() {
        let p = Tensor::from_vec(vec![1], vec![5.0]).unwrap().trainable();
        p.set_grad(vec![2.0]);
        let mut opt = Optimizer::momentum_sgd(1.0, 0.0, 0.0);
        opt.step(&named(p.clone())).unwrap();
        assert_eq!(p.to_vec(), vec![3.0]);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let vals = vec![1.25, -3.5, 0.0, 7e-3];
        let p = Tensor::from_vec(vec![4], vals.clone()).unwrap().trainable();
        p.set_grad(vec![0.3, -4.0, 2.0, 1.0]);
        for mut opt in [
            Optimizer::momentum_sgd(0.0, 0.9, 3e-4),
            Optimizer::adaptive_moments(0.0, 0.5, 0.999, 0.0),
        ] {
            opt.step(&named(p.clone())).unwrap();
            let got = p.to_vec();
            for (a, b) in got.iter().zip(&vals) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let p = Tensor::zeros(vec![2]).trainable();
        let mut opt = Optimizer::momentum_sgd(0.1, 0.9, 0.0);
        assert!(opt.step(&named(p)).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.025), 0.025);
        assert_eq!(cosine_lr(100, 100, 0.025), 0.0);
        let mid = cosine_lr(50, 100, 0.025);
        assert!((mid - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn clip_scales_exactly() {
        let p = Tensor::zeros(vec![2]).trainable();
        p.set_grad(vec![6.0, 8.0]);
        let norm = clip_grad_norm(&named(p.clone()), 5.0).unwrap();
        assert_eq!(norm, 10.0);
        assert_eq!(p.grad().unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn clip_leaves_small_grads_alone() {
        let p = Tensor::zeros(vec![2]).trainable();
        p.set_grad(vec![0.3, 0.4]);
        clip_grad_norm(&named(p.clone()), 5.0).unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.3, 0.4]);
    }

    #[test]
    fn adaptive_moments_descends() {
        let p = Tensor::from_vec(vec![1], vec![1.0]).unwrap().trainable();
        let mut opt = Optimizer::adaptive_moments(0.1, 0.5, 0.999, 0.0);
        for _ in 0..20 {
            // grad of 0.5*p^2 is p
            p.set_grad(vec![p.item()]);
            opt.step(&named(p.clone())).unwrap();
        }
        assert!(p.item().abs() < 1.0);
    }
}
