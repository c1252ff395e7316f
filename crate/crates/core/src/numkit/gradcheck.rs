//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::numkit::tape::{Tape, Var};
use crate::numkit::tensor::Tensor;

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn check_gradients<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)
}

/// [`check_gradients`] over several input tensors at once.
pub fn check_gradients_multi<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("check_gradients: eps must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).sum();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("check_gradients: f(point) = {value}")));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = points.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..points[k].numel() {
            let orig = points[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
