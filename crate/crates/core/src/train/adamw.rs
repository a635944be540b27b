//! AdamW with linear warm-up and global-norm gradient clipping.
//!
//! Decoupled weight decay is applied to matrices only; vectors (biases,
//! norm scales, gates) are exempt.

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }

    /// Effective learning rate after linear warm-up, for step index `step`
    /// (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.config.warmup_steps == 0 {
            return self.config.lr;
        }
        let ramp = (step as f64 / self.config.warmup_steps as f64).min(1.0);
        self.config.lr * ramp
    }

    /// Scales gradients in place so their global L2 norm is at most
    /// `grad_clip`. Returns the pre-clip norm.
    pub fn clip(&self, grads: &mut IndexMap<String, ArrayD<f64>>) -> f64 {
        let norm_sq: f64 = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        let norm = norm_sq.sqrt();
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let scale = self.config.grad_clip / norm;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }
        norm
    }

    /// One update. Parameters without a gradient entry are untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &IndexMap<String, ArrayD<f64>>) {
        self.step += 1;
        let lr = self.lr_at(self.step);
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            if !self.m.contains(name) {
                self.m.insert(name.clone(), ArrayD::zeros(grad.raw_dim()));
                self.v.insert(name.clone(), ArrayD::zeros(grad.raw_dim()));
            }
            let m = self.m.get_mut(name);
            m.zip_mut_with(grad, |m, g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let m = self.m.get(name).clone();
            let v = self.v.get_mut(name);
            v.zip_mut_with(grad, |v, g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let v = self.v.get(name);

            let param = store.get_mut(name);
            let decay = if param.ndim() >= 2 { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *param)
                .and(&m)
                .and(v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + c.eps) + decay * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn warmup_ramps_linearly() {
        let opt = AdamW::new(AdamWConfig {
            lr: 1.0,
            warmup_steps: 10,
            ..AdamWConfig::default()
        });
        assert!((opt.lr_at(1) - 0.1).abs() < 1e-12);
        assert!((opt.lr_at(5) - 0.5).abs() < 1e-12);
        assert_eq!(opt.lr_at(10), 1.0);
        assert_eq!(opt.lr_at(50), 1.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let opt = AdamW::new(AdamWConfig {
            grad_clip: 1.0,
            ..AdamWConfig::default()
        });
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[4]), 3.0));
        grads.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[4]), -4.0));
        let norm = opt.clip(&mut grads);
        assert!((norm - 10.0).abs() < 1e-12);
        let after: f64 = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..300 {
            let grad = store.get("x").clone() * 2.0;
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), grad);
            opt.apply(&mut store, &grads);
        }
        assert!(store.get("x").iter().all(|v| v.abs() < 0.05));
    }
}
