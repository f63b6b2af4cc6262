//! Parameter updates: SGD, Adam, global-norm clipping and the log σ step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::UncertaintyParams;
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        if let Optimizer::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Adam moments; empty for SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Params,
    pub v: Params,
}

impl OptimizerState {
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.t == other.t && self.m.bitwise_eq(&other.m) && self.v.bitwise_eq(&other.v)
    }
}

/// Applies one update to every tensor in `params`.
pub fn optimizer_step(
    params: &mut Params,
    state: &mut OptimizerState,
    grads: &Params,
    optimizer: &Optimizer,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .map_err(|_| Error::Contract(format!("missing gradient for learnable tensor `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
        }
    }
    match *optimizer {
        Optimizer::Sgd => {
            for (name, p) in params.iter_mut() {
                let g = grads.get(name)?;
                p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            if state.m.is_empty() {
                for (name, p) in params.iter() {
                    state.m.insert(name, Tensor::zeros(p.shape()));
                    state.v.insert(name, Tensor::zeros(p.shape()));
                }
            }
            state.t += 1;
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            for (name, p) in params.iter_mut() {
                let g = grads.get(name)?;
                let m = state.m.get_mut(name)?.data_mut();
                let v = state.v.get_mut(name)?.data_mut();
                for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

pub fn global_norm(grads: &Params) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Gradient step in log σ space: `s ← s − η·∂L/∂s`.
pub fn update_uncertainty(u: &mut UncertaintyParams, grad_log_sigma: (f64, f64), lr: f64) {
    u.log_sigma_intra -= lr * grad_log_sigma.0;
    u.log_sigma_inter -= lr * grad_log_sigma.1;
}

/// `∂total/∂log σ` for a frozen loss value: `1 − L·e^{−2s}`.
pub fn log_sigma_gradient(loss: f64, log_sigma: f64) -> f64 {
    1.0 - loss * (-2.0 * log_sigma).exp()
}
