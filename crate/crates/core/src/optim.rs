//! Adaptive-moment optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use gwnet_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.param(name).ok_or_else(|| Error::Config(format!("gradient for unknown `{name}`")))?;
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::Config(format!("`{name}`: gradient {} vs value {}", g.shape(), p.value.shape())));
            }
            let shape = g.shape();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let mut value = p.value.clone();
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), value.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = b1 * md[k] + (1.0 - b1) * gk;
                vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
                let mhat = md[k] / c1;
                let vhat = vd[k] / c2;
                pd[k] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            store.set(name, value)?;
        }
        Ok(())
    }

    /// Moment buffers as named blobs (`prefix.m.<name>`, `prefix.v.<name>`).
    pub fn blobs(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("{prefix}.m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{prefix}.v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Takes back the blobs written by [`Adam::blobs`] out of `blobs`.
    pub fn restore(&mut self, prefix: &str, blobs: &mut Vec<(String, Tensor)>) {
        let (mp, vp) = (format!("{prefix}.m."), format!("{prefix}.v."));
        let mut rest = Vec::with_capacity(blobs.len());
        for (name, t) in blobs.drain(..) {
            if let Some(k) = name.strip_prefix(&mp) {
                self.m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(&vp) {
                self.v.insert(k.to_string(), t);
            } else {
                rest.push((name, t));
            }
        }
        *blobs = rest;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gwnet_tensor::Shape;

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, -1.0]).unwrap(), true);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(Shape::new(1, 1, 1, 2), vec![3.0, -0.5]).unwrap());
        let mut adam = Adam::new(0.1, 0.5, 0.999);
        adam.step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7, "{w:?}");
    }

    #[test]
    fn zero_lr_and_frozen_params_stay_put() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(Shape::new(1, 1, 1, 1), 2.0), true);
        store.insert("buf", Tensor::full(Shape::new(1, 1, 1, 1), 2.0), false);
        let grads: BTreeMap<String, Tensor> =
            ["w", "buf"].iter().map(|n| (n.to_string(), Tensor::full(Shape::SCALAR, 1.0))).collect();
        let before = store.clone();
        Adam::new(0.0, 0.5, 0.999).step(&mut store, &grads).unwrap();
        assert_eq!(store, before);
        Adam::new(0.1, 0.5, 0.999).step(&mut store, &grads).unwrap();
        assert_eq!(store.get("buf").unwrap().item(), 2.0);
        assert_ne!(store.get("w").unwrap().item(), 2.0);
    }
}
