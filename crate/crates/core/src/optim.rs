use std::f64::consts::PI;

use nutrifuse_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Cosine annealing from `peak` at epoch 0 to zero at `total`.
pub fn cosine_lr(peak: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = epoch.min(total) as f64 / total as f64;
    peak * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// One update from the accumulated gradients. Nothing changes if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Param(format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len())));
        }
        let grads: Vec<Option<Vec<T>>> = params.iter().map(Tensor::grad).collect();
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
            p.update_data(|w| {
                for j in 0..w.len() {
                    let wj = w[j].to_f64().unwrap();
                    let gj = g[j].to_f64().unwrap() + wd * wj;
                    let mj = b1 * m[j].to_f64().unwrap() + (1.0 - b1) * gj;
                    let vj = b2 * v[j].to_f64().unwrap() + (1.0 - b2) * gj * gj;
                    m[j] = T::from_f64_lossy(mj);
                    v[j] = T::from_f64_lossy(vj);
                    w[j] = T::from_f64_lossy(wj - lr * (mj / c1) / ((vj / c2).sqrt() + eps));
                }
            })?;
        }
        Ok(())
    }
}
