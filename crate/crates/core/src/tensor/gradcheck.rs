//! Central finite-difference gradient checking.

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so components that are zero in
/// both estimates compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-3;

fn eval_scalar<T: Element, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let out = f(tape.constant(x))?.value()?;
    if out.numel() != 1 {
        return Err(Error::NotScalar(out.shape().to_vec()));
    }
    Ok(out.data()[0].as_f64())
}

/// Compare the tape gradient of scalar `f` at `x` against central differences
/// with the given step.
pub fn finite_difference_check<T: Element, F>(f: F, x: &Tensor<T>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tracked = Tensor::param(x.shape(), x.to_vec())?;
    let tape = Tape::new();
    let out = f(tape.var(&tracked))?;
    out.backward()?;
    let analytic: Vec<f64> = match tracked.grad() {
        Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    };
    drop(tape);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.detach();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + step);
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - step);
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 || e.is_nan() { (i, e) } else { best });
    Ok(GradCheckReport { analytic, numeric, max_rel_error, worst_index, tolerance, passed: max_rel_error < tolerance })
}
