//! Central-difference gradient verification harness.
//!
//! Rebuilds the function under test from scratch at shifted points, so the
//! finite-difference side never shares state with the tape it is checking.

use crate::autodiff::tape::{backward, Tape, ValueId};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates where both sides were zero (dead units); excluded from stats.
    pub coords_zero_both: usize,
    pub within_tol: usize,
    pub tol: f64,
    pub pass: bool,
    /// Relative error per checked coordinate, in slot-then-offset order.
    pub rel_errs: Vec<f64>,
}

impl GradCheckReport {
    pub fn fraction_within_tol(&self) -> f64 {
        if self.coords_checked == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.coords_checked as f64
        }
    }
}

/// Absolute floor below which analytic and FD gradients count as "both zero".
/// Central differences cannot resolve magnitudes near the round-off floor
/// ulp(f)/2eps (~5e-12 here), so relative error is meaningless below this.
const ZERO_BOTH_ATOL: f64 = 1e-6;

/// Compare tape gradients of a scalar-valued builder against central differences.
///
/// `build` receives a fresh tape and the parameter slots (registered in the
/// order of `point`) and must return the scalar loss value id.
pub fn grad_check<F>(build: F, point: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::contract(format!(
            "grad_check eps {eps} outside (0, 1e-3]"
        )));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::contract("grad_check function must be scalar-valued"));
        }
        Ok(tape.value(loss).item())
    };

    // Analytic gradients at the base point.
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = point.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let grads = backward(&tape, loss)?;
        ids.iter().map(|&id| grads.get(&tape, id)).collect()
    };

    let mut rel_errs = Vec::new();
    let mut zero_both = 0usize;
    let mut shifted: Vec<Tensor> = point.to_vec();
    for (slot, base) in point.iter().enumerate() {
        for i in 0..base.len() {
            let x0 = base.data()[i];
            shifted[slot].data_mut()[i] = x0 + eps;
            let f_plus = eval(&shifted)?;
            shifted[slot].data_mut()[i] = x0 - eps;
            let f_minus = eval(&shifted)?;
            shifted[slot].data_mut()[i] = x0;

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let g = analytic[slot].data()[i];
            if fd.abs() <= ZERO_BOTH_ATOL && g.abs() <= ZERO_BOTH_ATOL {
                zero_both += 1;
                continue;
            }
            let rel = (g - fd).abs() / g.abs().max(fd.abs());
            rel_errs.push(rel);
        }
    }

    let max_rel_err = rel_errs.iter().copied().fold(0.0, f64::max);
    let within_tol = rel_errs.iter().filter(|&&e| e <= tol).count();
    let coords_checked = rel_errs.len();
    Ok(GradCheckReport {
        max_rel_err,
        coords_checked,
        coords_zero_both: zero_both,
        within_tol,
        tol,
        pass: within_tol == coords_checked,
        rel_errs,
    })
}
