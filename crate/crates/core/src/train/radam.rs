//! Rectified adaptive-moment optimizer.
//!
//! Moving-average length rho_t = rho_inf - 2*t*beta2^t / (1 - beta2^t)
//! decides the branch each step: above 4, the bias-corrected adaptive
//! update is scaled by the variance rectification term
//! r_t = sqrt(((rho_t-4)(rho_t-2)rho_inf) / ((rho_inf-4)(rho_inf-2)rho_t));
//! at or below 4 the update is plain bias-corrected momentum, lr * m_hat.
//! With beta2 = 0.999 the first rectified step is t = 5.

use std::collections::BTreeMap;

use crate::model::Parameters;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Diagnostic switch: take the adaptive branch regardless of rho_t.
    pub force_adaptive: bool,
    /// Diagnostic switch: drop the rectification scale (r_t = 1), turning
    /// the adaptive branch into plain bias-corrected adaptive moments.
    pub rectify: bool,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            force_adaptive: false,
            rectify: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RAdamState<E: Element> {
    pub cfg: RAdamConfig,
    /// Current learning rate; the plateau callback mutates this.
    pub lr: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<E>>,
    v: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> RAdamState<E> {
    pub fn new(lr: f64, cfg: RAdamConfig) -> Self {
        RAdamState {
            cfg,
            lr,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// rho_inf = 2/(1-beta2) - 1.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.cfg.beta2) - 1.0
    }

    /// Moving-average length at step `t`.
    pub fn rho_t(&self, t: u64) -> f64 {
        let b2t = self.cfg.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification at step `t`; only meaningful when rho_t > 4.
    pub fn rectification(&self, t: u64) -> f64 {
        let rho_inf = self.rho_inf();
        let rho_t = self.rho_t(t);
        (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            .sqrt()
    }

    /// One optimizer step over every gradient entry. Gradient shapes must
    /// mirror the parameters; missing entries (non-trainable tensors) are
    /// untouched.
    pub fn step(&mut self, params: &mut Parameters<E>, grads: &BTreeMap<String, Tensor<E>>) {
        self.t += 1;
        let t = self.t;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::one() - b1;
        let one_m_b2 = E::one() - b2;
        let bias1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(t as i32);
        let rho_t = self.rho_t(t);
        let rectified = self.cfg.force_adaptive || rho_t > 4.0;
        let r_t = if !rectified {
            0.0
        } else if self.cfg.rectify {
            self.rectification(t)
        } else {
            1.0
        };
        let lr = E::from_f64(self.lr);
        let bias1_e = E::from_f64(bias1);
        let bias2_e = E::from_f64(bias2);
        let eps = E::from_f64(self.cfg.eps);
        let lr_r = E::from_f64(self.lr * r_t);

        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            debug_assert_eq!(m.shape(), grad.shape(), "moment shape for {name}");
            let theta = params.get_mut(name);
            for ((th, (mi, vi)), &g) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(grad.data())
            {
                *mi = b1 * *mi + one_m_b1 * g;
                *vi = b2 * *vi + one_m_b2 * g * g;
                let m_hat = *mi / bias1_e;
                if rectified {
                    let v_hat = (*vi / bias2_e).sqrt();
                    *th = *th - lr_r * m_hat / (v_hat + eps);
                } else {
                    *th = *th - lr * m_hat;
                }
            }
        }
    }
}
