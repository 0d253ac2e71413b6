//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::tape::{Tape, ValueId};
use super::tensor::Tensor;

/// Floor added to the relative-error denominator, so near-zero analytic
/// gradients compare absolutely.
const REL_FLOOR: f64 = 1e-8;

/// Default central-difference step. `eps^(1/3)`-ish balances truncation
/// against roundoff for f64 values of order 1.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compare analytic gradients of `f` against central differences with step
/// `h` at `params`, elementwise, and return the worst value of
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
///
/// `f` receives a fresh tape plus leaf ids for each param (all marked as
/// requiring gradients) and must return a scalar loss id. Params with no
/// gradient on the tape are treated as all-zero, so spurious detachment
/// shows up as a large error rather than a silent pass.
pub fn grad_check<F>(params: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Contract(format!("grad_check: invalid step {h}")));
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<ValueId>, ValueId)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = f(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Contract("grad_check: loss must be scalar".into()));
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| match grads.get(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let x = param.data()[ei];

            work[pi].data_mut()[ei] = x + h;
            let (tp, _, lp) = eval(&work)?;
            let up = tp.value(lp).item()?;

            work[pi].data_mut()[ei] = x - h;
            let (tm, _, lm) = eval(&work)?;
            let down = tm.value(lm).item()?;

            work[pi].data_mut()[ei] = x;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][ei];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: param {pi} element {ei}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / (a.abs() + REL_FLOOR);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
