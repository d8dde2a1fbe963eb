use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::GradTensor;

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences, returning the max relative error over the elements of `x`:
/// `|analytic - central| / (|central| + 1e-8)`.
///
/// `f` must be deterministic; it is re-evaluated 2·numel times with `x`
/// perturbed in place and restored afterwards.
pub fn finite_diff_check<F>(f: F, x: &GradTensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &GradTensor) -> Result<GradTensor>,
{
    if !x.requires_grad() {
        return Err(Error::contract(
            "finite_diff_check requires x with requires_grad",
        ));
    }
    let tape = Tape::new();
    let y = f(&tape, x)?;
    if y.numel() != 1 {
        return Err(Error::contract(format!(
            "finite_diff_check requires a scalar-valued f, got shape {:?}",
            y.shape()
        )));
    }
    x.zero_grad();
    tape.backward(&y)?;
    let analytic = x
        .grad()
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |x: &GradTensor| -> Result<f64> {
        let t = Tape::inference();
        Ok(f(&t, x)?.value())
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.get(i);
        x.set_element(i, orig + eps);
        let plus = eval(x)?;
        x.set_element(i, orig - eps);
        let minus = eval(x)?;
        x.set_element(i, orig);
        let central = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / (central.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
