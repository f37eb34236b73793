use crate::error::{CarlError, Result};

/// Central-difference gradient check over every coordinate of `theta`.
///
/// `f` returns the scalar value together with its analytic gradient. The
/// result is the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, theta: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    grad_check_coords(f, theta, &coords, h)
}

/// Same as [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_coords<F>(mut f: F, theta: &[f64], coords: &[usize], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(CarlError::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let (value, analytic) = f(theta)?;
    if !value.is_finite() {
        return Err(CarlError::numeric("grad_check objective", 0));
    }
    if analytic.len() != theta.len() {
        return Err(CarlError::Dimension {
            op: "grad_check",
            lhs: vec![theta.len()],
            rhs: vec![analytic.len()],
        });
    }
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CarlError::numeric(format!("grad_check objective at coordinate {i}"), 0));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
