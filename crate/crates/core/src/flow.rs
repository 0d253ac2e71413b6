//! Rectified-flow machinery: linear probability path, velocity objective,
//! logit-normal timestep sampling, Euler ODE sampling, and classifier-free
//! guidance, plus block generation against a decoding state.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{finalize_block, velocity_pass, ForwardState, ModelParams, TrackKind};
use crate::numerics::{Scalar, Tensor};

/// Sampler settings. Loss-side timestep draws share `timestep_loc` and
/// `timestep_scale`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSchedule {
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub timestep_loc: f64,
    pub timestep_scale: f64,
}

impl Default for FlowSchedule {
    fn default() -> Self {
        FlowSchedule {
            num_steps: 50,
            cfg_scale: 7.5,
            timestep_loc: 0.0,
            timestep_scale: 1.0,
        }
    }
}

impl FlowSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if !(self.timestep_scale > 0.0) || !self.timestep_scale.is_finite() {
            return Err(Error::Config(format!(
                "timestep_scale must be positive and finite, got {}",
                self.timestep_scale
            )));
        }
        if !self.timestep_loc.is_finite() || !self.cfg_scale.is_finite() {
            return Err(Error::Config("flow schedule values must be finite".into()));
        }
        Ok(())
    }
}

/// One training block on the linear noise path, with its targets.
#[derive(Clone, Debug)]
pub struct FlowBatch<S: Scalar> {
    pub x0: Tensor<S>,
    pub eps: Tensor<S>,
    /// Shared flow time for the block, strictly inside (0, 1).
    pub t: f64,
    pub x_t: Tensor<S>,
    pub v_target: Tensor<S>,
}

impl<S: Scalar> FlowBatch<S> {
    pub fn new(x0: Tensor<S>, eps: Tensor<S>, t: f64) -> Result<Self> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Contract(format!(
                "training flow time must lie strictly inside (0, 1), got {t}"
            )));
        }
        let x_t = interpolate(&x0, &eps, t)?;
        let v_target = velocity_target(&x0, &eps)?;
        Ok(FlowBatch { x0, eps, t, x_t, v_target })
    }
}

fn zip_map<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

/// Point on the linear path: `x_t = (1 - t) x0 + t eps`.
pub fn interpolate<S: Scalar>(x0: &Tensor<S>, eps: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("flow time {t} outside [0, 1]")));
    }
    let (w0, w1) = (S::from_f64(1.0 - t), S::from_f64(t));
    zip_map("interpolate", x0, eps, |x, e| w0 * x + w1 * e)
}

/// Constant velocity of the linear path: `v = eps - x0`.
pub fn velocity_target<S: Scalar>(x0: &Tensor<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
    zip_map("velocity_target", x0, eps, |x, e| e - x)
}

/// Mean squared error over all elements.
pub fn flow_loss<S: Scalar>(v_pred: &Tensor<S>, v_target: &Tensor<S>) -> Result<S> {
    if v_pred.shape() != v_target.shape() {
        return Err(Error::shape("flow_loss", v_pred.shape(), v_target.shape()));
    }
    if v_pred.numel() == 0 {
        return Err(Error::Contract("flow_loss over an empty batch".into()));
    }
    let mut acc = S::ZERO;
    for (&p, &t) in v_pred.data().iter().zip(v_target.data()) {
        let d = p - t;
        acc += d * d;
    }
    Ok(acc / S::from_f64(v_pred.numel() as f64))
}

/// Logit-normal draw: `sigmoid(loc + scale z)`, `z ~ N(0, 1)`. The result
/// is clamped into the open interval; f64 sigmoid saturates to exactly 0
/// or 1 beyond |arg| ~ 37, which no sane `loc` reaches in practice.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, loc: f64, scale: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let t = 1.0 / (1.0 + (-(loc + scale * z)).exp());
    t.max(f64::MIN_POSITIVE).min(1.0 - 0.5 * f64::EPSILON)
}

/// Integrate `dx/dt = v(x, t)` from t = 1 down to 0 on a uniform grid:
/// `x <- x - dt v(x, t_k)` with `t_k = 1 - k/num_steps`.
pub fn euler_sample<S: Scalar>(
    mut velocity_fn: impl FnMut(&Tensor<S>, f64) -> Result<Tensor<S>>,
    eps_init: &Tensor<S>,
    num_steps: usize,
) -> Result<Tensor<S>> {
    if num_steps == 0 {
        return Err(Error::Contract("euler_sample needs at least one step".into()));
    }
    let dt = S::from_f64(1.0 / num_steps as f64);
    let mut x = eps_init.clone();
    for k in 0..num_steps {
        let t = 1.0 - k as f64 / num_steps as f64;
        let v = velocity_fn(&x, t)?;
        if !v.is_all_finite() {
            return Err(Error::NonFinite(format!(
                "velocity field returned non-finite values at step {k} (t = {t})"
            )));
        }
        x = zip_map("euler_sample", &x, &v, |xi, vi| xi - dt * vi)?;
    }
    Ok(x)
}

/// Guidance extrapolation `v_uncond + s (v_cond - v_uncond)`. The fixed
/// points s = 0 and s = 1 are returned exactly; the general formula only
/// reproduces them up to rounding.
pub fn cfg_combine<S: Scalar>(
    v_uncond: &Tensor<S>,
    v_cond: &Tensor<S>,
    s: f64,
) -> Result<Tensor<S>> {
    if v_uncond.shape() != v_cond.shape() {
        return Err(Error::shape("cfg_combine", v_uncond.shape(), v_cond.shape()));
    }
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    let sv = S::from_f64(s);
    zip_map("cfg_combine", v_uncond, v_cond, |u, c| u + sv * (c - u))
}

/// Solve one latent block from pure noise against the finalized context in
/// `state`, commit it to the cache, and return the clean estimate
/// `[block_len, latent_dim]`.
///
/// Guided sampling (condition_present and cfg_scale != 1) evaluates both
/// tracks each step and needs a guided state; otherwise a single
/// conditioned-track pass per step suffices.
pub fn generate_block<S: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<S>,
    state: &mut ForwardState<S>,
    block_len: usize,
    schedule: &FlowSchedule,
    condition_present: bool,
    rng: &mut R,
) -> Result<Tensor<S>> {
    schedule.validate()?;
    if block_len == 0 {
        return Err(Error::Contract("generate_block needs a non-empty block".into()));
    }
    let guided = condition_present && schedule.cfg_scale != 1.0;
    if guided && !state.is_guided() {
        return Err(Error::Contract(
            "guided generation needs a state with a null track".into(),
        ));
    }

    let dim = params.config.latent_dim;
    let noise: Vec<S> = (0..block_len * dim)
        .map(|_| S::from_f64(rng.sample(StandardNormal)))
        .collect();
    let eps_init = Tensor::new(&[block_len, dim], noise)?;

    let x0 = euler_sample(
        |x, t| {
            let v_cond = velocity_pass(params, state, TrackKind::Conditioned, x, t)?;
            if !guided {
                return Ok(v_cond);
            }
            let v_uncond = velocity_pass(params, state, TrackKind::Null, x, t)?;
            cfg_combine(&v_uncond, &v_cond, schedule.cfg_scale)
        },
        &eps_init,
        schedule.num_steps,
    )?;
    finalize_block(params, state, &x0)?;
    Ok(x0)
}
