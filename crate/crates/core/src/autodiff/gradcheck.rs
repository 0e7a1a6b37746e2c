//! Central finite-difference gradient checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Floor on the denominator of the relative error, so gradients that are
/// essentially zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the tape gradient of scalar `f` at `x` against
/// `(f(x+h) - f(x-h)) / 2h`, returning the largest relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`finite_diff_check`].
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = probe[which].data()[e];
            probe[which].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
    }
    Ok(worst)
}
