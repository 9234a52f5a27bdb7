use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Coordinates whose analytic and numeric derivatives differ by less than
/// this are counted as exact.
pub const FD_ABS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences over every coordinate of every input.
pub fn grad_check_many<F>(f: F, points: &[Tensor]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let y = f(&tape, &vars)?.item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (which, point) in points.iter().enumerate() {
        for j in 0..point.len() {
            let original = point.data()[j];
            work[which].data_mut()[j] = original + FD_STEP;
            let up = eval(&work)?;
            work[which].data_mut()[j] = original - FD_STEP;
            let down = eval(&work)?;
            work[which].data_mut()[j] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let exact = analytic[which].data()[j];
            let abs_err = libm::fabs(exact - numeric);
            let rel_err = if abs_err <= FD_ABS_TOL {
                0.0
            } else {
                abs_err / libm::fabs(exact).max(libm::fabs(numeric))
            };
            report.max_abs_error = report.max_abs_error.max(abs_err);
            report.max_rel_error = report.max_rel_error.max(rel_err);
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(point))
}
