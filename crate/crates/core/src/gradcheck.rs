//! Central finite differences for gradient verification.
//!
//! This path never touches the analytic backward code: it re-evaluates the
//! forward map at perturbed points, which is what makes it usable as an
//! independent oracle for every `_bwd` in the crate.

/// Central-difference gradient of a scalar function of a flat vector.
///
/// `f` must be a pure function of its argument; `x` is restored before return.
pub fn finite_diff_grad<F>(f: F, x: &mut [f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(x);
        x[i] = orig - step;
        let fm = f(x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Largest relative discrepancy between analytic and numeric gradients.
///
/// The denominator is floored at `floor` so that near-zero gradient entries
/// compare absolutely instead of amplifying roundoff.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Step size used throughout the gradient suites.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor for relative errors; gradients in these suites are
/// O(1e-2..1) so this floors only genuinely negligible entries.
pub const REL_FLOOR: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_matches_quadratic() {
        // f(x) = sum x_i^2, grad = 2x
        let mut x = vec![0.3, -1.2, 2.0];
        let g = finite_diff_grad(|v| v.iter().map(|a| a * a).sum(), &mut x, FD_STEP);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8, "{gi} vs {}", 2.0 * xi);
        }
        assert_eq!(x, vec![0.3, -1.2, 2.0]); // restored
    }

    #[test]
    fn max_rel_err_flags_discrepancy() {
        let a = vec![1.0, 2.0];
        let n = vec![1.0, 2.2];
        let e = max_rel_err(&a, &n, REL_FLOOR);
        assert!(e > 0.01 && e < 0.1);
    }
}
