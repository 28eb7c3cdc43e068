//! Adam optimizer over named parameter arrays.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: IndexMap<String, DenseArray>,
    v: IndexMap<String, DenseArray>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One Adam update over `params` given `grads`, both keyed by name.
    /// Parameters without a gradient entry are treated as zero-gradient.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, DenseArray>,
        grads: &IndexMap<String, DenseArray>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let zero = DenseArray::zeros(p.shape().to_vec());
            let g = grads.get(name).unwrap_or(&zero);
            if g.shape() != p.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter `{name}` shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| DenseArray::zeros(p.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| DenseArray::zeros(p.shape().to_vec()));
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.check_finite(&format!("parameter `{name}` after adam step"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> IndexMap<String, DenseArray> {
        let mut m = IndexMap::new();
        m.insert("theta".to_string(), DenseArray::scalar(v));
        m
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = single(1.5);
        let mut adam = AdamState::new(1e-2);
        for _ in 0..10 {
            adam.step(&mut params, &single(0.0)).unwrap();
        }
        assert_eq!(params["theta"].item(), 1.5);
        assert_eq!(adam.v["theta"].item(), 0.0);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // with eps -> 0, the bias-corrected first step is exactly lr*sign(g)
        let mut params = single(0.0);
        let mut adam = AdamState::new(0.1);
        adam.eps = 1e-300;
        adam.step(&mut params, &single(3.7)).unwrap();
        assert!((params["theta"].item() + 0.1).abs() < 1e-12);
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (theta - 5)^2 from 0
        let mut params = single(0.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..2000 {
            let g = 2.0 * (params["theta"].item() - 5.0);
            adam.step(&mut params, &single(g)).unwrap();
        }
        assert!((params["theta"].item() - 5.0).abs() < 1e-2);
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let mut params = single(0.0);
        let mut adam = AdamState::new(0.1);
        let mut bad = IndexMap::new();
        bad.insert(
            "theta".to_string(),
            DenseArray::from_slice(&[1.0, 2.0]),
        );
        assert!(adam.step(&mut params, &bad).is_err());
    }
}
