//! Adam with decoupled weight decay over named parameter tensors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamwConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamwConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "optimizer eps must be positive and weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates in canonical tensor order.
#[derive(Clone)]
pub struct Moments<S: Scalar> {
    pub(crate) entries: Vec<(String, Tensor<S>, Tensor<S>)>,
    pub(crate) step: u64,
}

impl<S: Scalar> Moments<S> {
    pub fn zeros_like(params: &ModelParams<S>) -> Self {
        let mut entries = Vec::with_capacity(params.tensor_count());
        params.visit(|name, t| {
            entries.push((name.to_string(), Tensor::zeros(t.shape()), Tensor::zeros(t.shape())));
        });
        Moments { entries, step: 0 }
    }

    /// Optimizer steps taken so far (drives bias correction).
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Tracked tensor names in canonical order; mirrors the parameter set
    /// exactly, nothing more.
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _, _)| n.as_str()).collect()
    }
}

/// One optimizer step: `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)`.
/// Tensors absent from `grads` are treated as zero-gradient; their moments
/// keep decaying and weight decay still applies.
pub fn adamw_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &HashMap<String, Tensor<S>>,
    moments: &mut Moments<S>,
    lr: f64,
    config: &AdamwConfig,
) -> Result<()> {
    config.validate()?;
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    moments.step += 1;
    let t = moments.step as i32;
    let b1 = S::from_f64(config.beta1);
    let b2 = S::from_f64(config.beta2);
    let c1 = S::from_f64(1.0 - config.beta1);
    let c2 = S::from_f64(1.0 - config.beta2);
    let inv_bc1 = S::from_f64(1.0 / (1.0 - config.beta1.powi(t)));
    let inv_bc2 = S::from_f64(1.0 / (1.0 - config.beta2.powi(t)));
    let lr_s = S::from_f64(lr);
    let eps = S::from_f64(config.eps);
    let wd = S::from_f64(config.weight_decay);

    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    params.visit_mut(|name, p| {
        if failure.is_some() {
            return;
        }
        let (m_name, m, v) = &mut moments.entries[idx];
        idx += 1;
        debug_assert_eq!(m_name, name);
        let grad = grads.get(name);
        if let Some(g) = grad {
            if g.shape() != p.shape() {
                failure = Some(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
                return;
            }
            if !g.is_all_finite() {
                failure = Some(Error::NonFinite(format!("gradient of {name} is not finite")));
                return;
            }
        }
        let md = m.data_mut();
        let vd = v.data_mut();
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let g = grad.map_or(S::ZERO, |g| g.data()[i]);
            md[i] = b1 * md[i] + c1 * g;
            vd[i] = b2 * vd[i] + c2 * g * g;
            let m_hat = md[i] * inv_bc1;
            let v_hat = vd[i] * inv_bc2;
            pd[i] = pd[i] - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    debug_assert_eq!(idx, moments.entries.len());
    Ok(())
}
