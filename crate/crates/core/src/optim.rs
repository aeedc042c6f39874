//! Adam over a [`ParamStore`].

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::policy::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every parameter with a gradient; `None` entries (frozen
    /// parameters) are left untouched. Non-finite gradients abort before any
    /// parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract("gradient list does not match parameters"));
        }
        for (p, g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.value.len() {
                    return Err(Error::shape("adam", format!("gradient of `{}`", p.name)));
                }
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in store.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
