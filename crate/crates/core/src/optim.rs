use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Momentum SGD: `v <- momentum * v + grad; param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update and zeroes the gradients. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            if let Some(i) = t.grad().and_then(|g| g.iter().position(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{name}' at index {i}"
                )));
            }
        }
        for (name, t) in store.iter_mut() {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((vi, gi), p) in v.iter_mut().zip(&grad).zip(t.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// Single momentum-SGD update on a store with a fresh optimizer state.
pub fn sgd_step(store: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    Sgd::new(lr, momentum)?.step(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(value)).unwrap();
        s.get_mut("p").unwrap().grad_mut().unwrap()[0] = grad;
        s
    }

    #[test]
    fn plain_step() {
        let mut s = store_with(1.0, 0.5);
        sgd_step(&mut s, 0.1, 0.0).unwrap();
        assert!((s.get("p").unwrap().item() - 0.95).abs() < 1e-15);
        assert_eq!(s.get("p").unwrap().grad().unwrap()[0], 0.0);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut s = store_with(1.0, 0.0);
        sgd_step(&mut s, 0.1, 0.9).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 0.5, p1 = 1 - 0.05 = 0.95
        // v2 = 0.9 * 0.5 + 0.2 = 0.65, p2 = 0.95 - 0.065 = 0.885
        let mut s = store_with(1.0, 0.5);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut s).unwrap();
        s.get_mut("p").unwrap().grad_mut().unwrap()[0] = 0.2;
        opt.step(&mut s).unwrap();
        assert!((s.get("p").unwrap().item() - 0.885).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store_with(1.0, f64::NAN);
        let err = sgd_step(&mut s, 0.1, 0.0).unwrap_err().to_string();
        assert!(err.contains("'p'"), "{err}");
        assert_eq!(s.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.5).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
    }
}
