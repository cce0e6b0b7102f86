//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor so that near-zero gradient pairs are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks the tape gradient of `f` at `params` against central differences
/// with step `h` on every coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let out = f(&mut tape, &vars)?;
        let mut grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| grads.take(v).expect("leaf gradient"))
            .collect::<Vec<_>>()
    };
    let value = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant_ref(p)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    compare_gradients(value, params, &analytic, h, tol)
}

/// Compares a supplied gradient against central differences of `value`.
pub fn compare_gradients<F>(
    value: F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut coordinates = 0;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = value(&work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = value(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[p].data()[i], numeric);
            // NaN compares false everywhere, so test it explicitly
            if err.is_nan() || err > max_rel_error {
                max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                worst = Some((p, i));
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}
