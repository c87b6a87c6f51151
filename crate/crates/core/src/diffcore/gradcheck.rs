//! Finite-difference verification of reverse-mode gradients.

use crate::diffcore::array::Array;
use crate::diffcore::tape::{NodeId, Tape};
use crate::error::{CoreError, Result};

/// Relative error between an analytic and a numeric derivative, guarded
/// against blow-up near zero: |a - n| / max(1, |a|, |n|).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

fn eval_loss<F>(values: &[Array], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.val(loss).numel() != 1 {
        return Err(CoreError::Validation(format!(
            "grad check requires a scalar loss, got shape {:?}",
            tape.val(loss).shape
        )));
    }
    let v = tape.val(loss).data[0];
    if !v.is_finite() {
        return Err(CoreError::NonFinite("grad check loss"));
    }
    Ok(v)
}

/// Central-difference gradients of `f` at `values`, one array per input,
/// every coordinate perturbed. Intended for small probe instances.
pub fn finite_diff<F>(values: &[Array], f: F, step: f64) -> Result<Vec<Array>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(CoreError::Validation("finite_diff step must be > 0".into()));
    }
    let mut work: Vec<Array> = values.to_vec();
    let mut grads: Vec<Array> = values.iter().map(|v| Array::zeros(&v.shape)).collect();
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let orig = work[p].data[i];
            work[p].data[i] = orig + step;
            let up = eval_loss(&work, &f)?;
            work[p].data[i] = orig - step;
            let dn = eval_loss(&work, &f)?;
            work[p].data[i] = orig;
            grads[p].data[i] = (up - dn) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Compare reverse-mode gradients of `f` against central differences and
/// return the maximum relative error over the checked coordinates. When the
/// total coordinate count exceeds `max_coords`, coordinates are strided
/// deterministically so the probe stays cheap on larger instances.
pub fn grad_check<F>(values: &[Array], f: F, step: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(CoreError::Validation("grad_check step must be > 0".into()));
    }
    if max_coords == 0 {
        return Err(CoreError::Validation("grad_check needs max_coords >= 1".into()));
    }

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.val(loss).numel() != 1 {
        return Err(CoreError::Validation(format!(
            "grad_check requires a scalar loss, got shape {:?}",
            tape.val(loss).shape
        )));
    }
    if !tape.val(loss).data[0].is_finite() {
        return Err(CoreError::NonFinite("grad_check loss"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Array> = ids.iter().map(|&id| tape.grad(id)).collect();

    let total: usize = values.iter().map(Array::numel).sum();
    let stride = if total <= max_coords {
        1
    } else {
        total.div_ceil(max_coords)
    };

    let mut work: Vec<Array> = values.to_vec();
    let mut max_err = 0.0_f64;
    let mut coord = 0usize;
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let checked = coord % stride == 0;
            coord += 1;
            if !checked {
                continue;
            }
            let orig = work[p].data[i];
            work[p].data[i] = orig + step;
            let up = eval_loss(&work, &f)?;
            work[p].data[i] = orig - step;
            let dn = eval_loss(&work, &f)?;
            work[p].data[i] = orig;
            let numeric = (up - dn) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[p].data[i], numeric));
        }
    }
    Ok(max_err)
}
