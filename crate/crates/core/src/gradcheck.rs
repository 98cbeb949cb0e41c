//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Step used by the acceptance harness.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input and flat coordinate where the maximum occurred.
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.item()
}

/// Checks `f` (a graph builder over `inputs`) against central differences with
/// step `h` on every coordinate of every input.
///
/// The relative error per coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    finite_diff_check_hooked(f, inputs, h, |_| {})
}

/// Like [`finite_diff_check_many`], but lets `hook` rewrite the analytic
/// gradients before comparison. Used to self-test the harness.
pub fn finite_diff_check_hooked<F, H>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    hook: H,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    H: FnOnce(&mut [Tensor]),
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let value = out.item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("f is {value} at the base point")));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };
    hook(&mut analytic);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for c in 0..work[k].len() {
            let orig = work[k].data()[c];
            work[k].data_mut()[c] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work[k].data_mut()[c] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work[k].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "f is non-finite when perturbing input {k} coordinate {c}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = k;
                report.worst_coord = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}
