//! Central finite-difference gradient oracle.
//!
//! Evaluates `f` only through its forward path, so it stays independent of
//! the reverse-mode machinery it is used to check.

use super::{Tensor, TensorError};

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(
    f: F,
    x: &Tensor,
    h: f64,
) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&Tensor) -> f64,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArg(format!("step size must be > 0, got {h}")));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "finite difference at coordinate {i}: f(+h)={fp}, f(-h)={fm}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Central difference at a subset of coordinates; used for composites whose
/// full-coordinate sweep would be too slow.
pub fn finite_difference_at<F>(
    f: F,
    x: &Tensor,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&Tensor) -> f64,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArg(format!("step size must be > 0, got {h}")));
    }
    let mut grad = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "finite difference at coordinate {i}: f(+h)={fp}, f(-h)={fm}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max(|b_i|, floor)`; the floor guards near-zero
/// reference entries.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}
