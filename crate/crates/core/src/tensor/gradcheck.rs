//! Central finite-difference verification of the backward pass.

use crate::error::{Error, Result};

use super::{Tape, Tensor};

/// Relative disagreement between an analytic and a numeric gradient:
/// max over elements of |a - n| / max(|a|, |n|, 1e-8).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn central_diff_grad(
    x: &[f64],
    epsilon: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = f(&probe)?;
        probe[i] = orig - epsilon;
        let minus = f(&probe)?;
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Checks the tape gradient of `f` at `x` against central differences and
/// returns the max relative error. `f` must produce a scalar.
pub fn finite_difference_check(
    f: impl Fn(&mut Tape, &Tensor) -> Result<Tensor>,
    x: &Tensor,
    epsilon: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x);
    let y = f(&mut tape, &leaf)?;
    if y.numel() != 1 {
        return Err(Error::shape(format!(
            "finite_difference_check: f returned shape {:?}, expected scalar",
            y.shape()
        )));
    }
    let grads = tape.backward(&y)?;
    let analytic = grads
        .of(&leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let shape = x.shape().to_vec();
    let numeric = central_diff_grad(x.data(), epsilon, |probe| {
        let mut t = Tape::new();
        let xt = Tensor::new(shape.clone(), probe.to_vec())?;
        f(&mut t, &xt)?.item()
    })?;
    Ok(max_rel_error(&analytic, &numeric))
}
