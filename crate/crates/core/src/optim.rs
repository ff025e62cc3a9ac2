//! Adam with bias correction.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<R> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<R>>>,
    v: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts the whole step before
    /// any parameter changes, naming the offending tensor.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &ParamGrads<R>) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    bail!(NonFinite, "gradient of `{}`", store.name(id));
                }
                if g.shape() != store.get(id).shape() {
                    bail!(Shape, "gradient of `{}` has shape {:?}", store.name(id), g.shape());
                }
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let n = grads.global_norm();
                if n > max {
                    R::of(max / n)
                } else {
                    R::one()
                }
            }
            None => R::one(),
        };
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = R::of(1.0 - libm::pow(b1, t as f64));
        let bc2 = R::of(1.0 - libm::pow(b2, t as f64));
        let (b1, b2) = (R::of(b1), R::of(b2));
        let lr = R::of(self.config.lr);
        let eps = R::of(self.config.eps);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let shape = g.shape().to_vec();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let gv = gv * clip;
                *mv = b1 * *mv + (R::one() - b1) * gv;
                *vv = b2 * *vv + (R::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(value));
        s
    }

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut store = one_param(1.5);
        let mut grads = ParamGrads::empty(1);
        grads.set(store.id("p").unwrap(), Tensor::scalar(0.0));
        let mut adam = Adam::new(cfg(0.1));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.by_name("p").unwrap().item(), 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², update = lr * g / (|g| + eps)
        let mut store = one_param(1.0);
        let mut grads = ParamGrads::empty(1);
        grads.set(store.id("p").unwrap(), Tensor::scalar(1.0));
        let mut adam = Adam::new(cfg(0.1));
        adam.step(&mut store, &grads).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.by_name("p").unwrap().item() - expected).abs() < 1e-12);
        assert!((store.by_name("p").unwrap().item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::new(&[2], alloc::vec![0.3, -0.2]));
        let b = store.insert("b", Tensor::new(&[2], alloc::vec![0.3, -0.2]));
        let mut adam = Adam::new(cfg(0.01));
        for k in 0..5 {
            let mut grads = ParamGrads::empty(2);
            let g = Tensor::new(&[2], alloc::vec![0.1 * k as f64, -0.7]);
            grads.set(a, g.clone());
            grads.set(b, g);
            adam.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get(a), store.get(b));
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut store = one_param(1.0);
        let mut grads = ParamGrads::empty(1);
        grads.set(store.id("p").unwrap(), Tensor::scalar(f64::NAN));
        let mut adam = Adam::new(cfg(0.1));
        let err = adam.step(&mut store, &grads).unwrap_err();
        assert!(alloc::format!("{err}").contains("`p`"));
        assert_eq!(store.by_name("p").unwrap().item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
