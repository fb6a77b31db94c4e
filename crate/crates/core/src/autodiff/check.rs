//! Finite-difference oracles for gradient verification.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h·e_k) − f(x − h·e_k)) / (2h)` per coordinate.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive and finite, got {h}"
        )));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        grad[k] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Worst-coordinate disagreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
    pub ok: bool,
}

/// Per-coordinate rule: pass when `|a−n| ≤ abs_tol`, or when the error
/// relative to `max(|a|,|n|)` is at most `rel_tol`.
pub fn compare_gradients(
    analytic: &Tensor,
    numeric: &Tensor,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheck> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape(
            "compare_gradients",
            format!("{:?} vs {:?}", analytic.shape(), numeric.shape()),
        ));
    }
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst_index = 0usize;
    let mut ok = true;
    for (k, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        if abs > max_abs {
            max_abs = abs;
        }
        let passes = abs <= abs_tol || rel <= rel_tol;
        if rel > max_rel {
            max_rel = rel;
            worst_index = k;
        }
        if !passes {
            ok = false;
        }
    }
    Ok(GradCheck {
        max_rel,
        max_abs,
        worst_index,
        ok,
    })
}
