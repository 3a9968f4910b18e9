use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub(crate) t: u64,
    #[serde(skip)]
    pub(crate) m: BTreeMap<String, Tensor>,
    #[serde(skip)]
    pub(crate) v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that has a gradient. Returns
    /// the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> f64 {
        let norm = grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let x = store.get("x").unwrap().clone();
            let g = x.map(|v| 2.0 * (v - 1.0));
            opt.step(&mut store, &BTreeMap::from([("x".to_string(), g)]));
        }
        for v in store.get("x").unwrap().data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(0.0));
        let mut opt = Adam::new(0.01);
        opt.step(&mut store, &BTreeMap::from([("x".to_string(), Tensor::scalar(5.0))]));
        assert!((store.get("x").unwrap().item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_reports_unclipped_norm() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_vec(&[2], vec![0.0, 0.0]));
        let mut opt = Adam::new(0.1).with_clip(1.0);
        let n = opt.step(&mut store, &BTreeMap::from([("x".to_string(), Tensor::from_vec(&[2], vec![3.0, 4.0]))]));
        assert_eq!(n, 5.0);
    }
}
