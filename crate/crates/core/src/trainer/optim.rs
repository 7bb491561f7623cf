//! AdamW with decoupled weight decay.
//!
//! ```text
//! m ← β₁·m + (1−β₁)·g
//! v ← β₂·v + (1−β₂)·g²
//! θ ← θ·(1 − lr·λ) − lr · (m / (1−β₁ᵗ)) / (sqrt(v / (1−β₂ᵗ)) + ε)
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Float, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub weight_decay: Float,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers for one [`ParamStore`]. Frozen parameters get no state and
/// are never written.
#[derive(Clone, Debug)]
pub struct OptimState {
    cfg: AdamWConfig,
    moments: Vec<Option<(Tensor, Tensor)>>,
    step: u64,
    touched: BTreeSet<String>,
}

impl OptimState {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let moments = store
            .iter()
            .map(|p| {
                p.trainable.then(|| {
                    (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))
                })
            })
            .collect();
        Self {
            cfg,
            moments,
            step: 0,
            touched: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Names of every parameter this optimizer has written.
    pub fn touched(&self) -> &BTreeSet<String> {
        &self.touched
    }

    /// One update from the gradients currently held in `store`. Nothing is
    /// modified if any trainable gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: Float) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(Error::config("optimizer state does not match parameter store"));
        }
        for p in store.iter().filter(|p| p.trainable) {
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (p, state) in store.iter_mut().zip(self.moments.iter_mut()) {
            let (Some((m, v)), true) = (state.as_mut(), p.trainable) else {
                continue;
            };
            let g = p.grad.data();
            for (((w, m), v), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !self.touched.contains(&p.name) {
                self.touched.insert(p.name.clone());
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimState::step`].
pub fn adamw_step(store: &mut ParamStore, opt: &mut OptimState, lr: Float) -> Result<()> {
    opt.step(store, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: Float, g: Float) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v), true);
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let mut s = scalar_store(1.5, 0.0);
        let mut opt = OptimState::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(s.find("w").unwrap()).data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 1e-3;
        let mut s = scalar_store(0.0, 1.0);
        let cfg = AdamWConfig::default();
        let mut opt = OptimState::new(&s, cfg);
        opt.step(&mut s, lr).unwrap();
        // m̂ = v̂ = 1 after bias correction: Δ = −lr / (1 + ε).
        let expected = -lr / (1.0 + cfg.eps);
        let got = s.value(s.find("w").unwrap()).data()[0];
        assert!((got - expected).abs() < 1e-18, "{got} vs {expected}");
    }

    #[test]
    fn decoupled_decay_shrinks_by_factor() {
        let lr = 0.01;
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = OptimState::new(
            &s,
            AdamWConfig {
                weight_decay: 0.1,
                ..AdamWConfig::default()
            },
        );
        opt.step(&mut s, lr).unwrap();
        let got = s.value(s.find("w").unwrap()).data()[0];
        assert_eq!(got, 2.0 * (1.0 - lr * 0.1));
    }

    #[test]
    fn nan_gradient_aborts_with_name_and_leaves_values() {
        let mut s = scalar_store(1.0, Float::NAN);
        let mut opt = OptimState::new(&s, AdamWConfig::default());
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s.value(s.find("w").unwrap()).data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn frozen_params_are_never_written() {
        let mut s = ParamStore::new();
        let f = s.add("frozen", Tensor::scalar(3.0), false);
        let t = s.add("live", Tensor::scalar(3.0), true);
        s.get_mut(f).grad = Tensor::scalar(1.0);
        s.get_mut(t).grad = Tensor::scalar(1.0);
        let mut opt = OptimState::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(f).data(), &[3.0]);
        assert_ne!(s.value(t).data(), &[3.0]);
        assert_eq!(opt.touched().iter().collect::<Vec<_>>(), vec!["live"]);
    }
}
