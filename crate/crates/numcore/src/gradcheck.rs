//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences with step `eps`.
///
/// Returns the maximum over components of
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`. A NaN anywhere
/// makes the result NaN.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Real,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor<S>| -> Result<S> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst = S::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (S::lit(2.0) * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + S::lit(1e-12));
        if err.is_nan() {
            return Ok(S::nan());
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
