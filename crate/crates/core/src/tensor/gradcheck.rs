//! Central finite-difference check of tape gradients.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub coordinates: usize,
}

/// Compare `backward()` with central differences for every coordinate of
/// every parameter. `f` builds a scalar loss from the parameter vars.
pub fn grad_check<F>(f: F, params: &[Array], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let eval = |ps: &[Array]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Array> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let x = p.data()[k];
            work[pi].data_mut()[k] = x + h;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = x - h;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
            report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
            report.coordinates += 1;
        }
    }
    Ok(report)
}
