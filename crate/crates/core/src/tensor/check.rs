//! Central-difference validation of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar-valued function against central
/// differences, coordinate by coordinate.
///
/// `f` receives a fresh tape and the input registered as a leaf, and must
/// return a scalar output. The result is
/// `max_i |(f(x + h e_i) - f(x - h e_i)) / 2h - g_i| / max(1, |g_i|)`,
/// where `g` is the gradient reported by [`Tape::backward`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::param(
            "finite_diff_check",
            format!("step size must be positive, got {h}"),
        ));
    }

    // Analytic gradient.
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::contract(
            "finite_diff_check",
            format!(
                "function output must be scalar, got shape {:?}",
                tape.value(out).shape()
            ),
        ));
    }
    let grads = tape.backward(out)?;
    let g: Vec<f64> = match grads.get(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    // Forward-only evaluation at a perturbed point.
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec(x.shape().to_vec(), data)?);
        let out = f(&mut tape, xv)?;
        tape.value(out).item()
    };

    let base = x.as_slice();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (fd - g[i]).abs() / g[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
