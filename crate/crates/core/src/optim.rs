//! AdamW: Adam moments with decoupled weight decay.

use crate::nn::{Float, Module};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// L2 norm of all accumulated gradients.
    pub fn grad_norm<M: Module<T>>(model: &M) -> f64 {
        let mut s = 0.0f64;
        model.visit_params("", &mut |_, p| {
            s += p.grad.iter().map(|g| Float::to_f64(*g).powi(2)).sum::<f64>();
        });
        s.sqrt()
    }

    /// Rescale gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm<M: Module<T>>(model: &mut M, max_norm: f64) -> f64 {
        let norm = Self::grad_norm(model);
        if norm > max_norm {
            let s = T::c(max_norm / norm);
            model.visit_params_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= s));
        }
        norm
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step<M: Module<T>>(&mut self, model: &mut M) {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let decay = T::c(1.0 - c.lr * c.weight_decay);
        let step_size = T::c(c.lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(c.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_params_mut("", &mut |_, p| {
            if ms.len() <= i {
                ms.push(vec![T::zero(); p.len()]);
                vs.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for k in 0..p.len() {
                let g = p.grad[k];
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let denom = (v[k] * inv_bc2).sqrt() + eps;
                p.value[k] = p.value[k] * decay - step_size * m[k] / denom;
                p.grad[k] = T::zero();
            }
            i += 1;
        });
    }
}
