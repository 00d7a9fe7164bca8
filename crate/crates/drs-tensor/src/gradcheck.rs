//! Finite-difference gradient oracle (test support).
//!
//! The oracle re-evaluates a scalar function of raw `f64` parameter buffers
//! at perturbed points; it never touches the tape, so it stays independent
//! of the reverse-mode implementation it is used to check. Intended for the
//! double-precision check mode with h = 1e-3.

/// Central finite differences of `f` with respect to every element of every
/// parameter buffer.
pub fn central_diff<F>(mut f: F, params: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let plus = f(&work);
            work[p][i] = orig - h;
            let minus = f(&work);
            work[p][i] = orig;
            g[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Relative error with an absolute floor so near-zero gradient pairs compare
/// on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Largest elementwise [`rel_err`] between analytic and numeric gradients.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len(), "gradient buffers must align");
        for (&av, &nv) in a.iter().zip(n) {
            worst = worst.max(rel_err(av, nv));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_recovers_quadratic_gradient() {
        let params = vec![vec![1.0, 2.0, -3.0]];
        let g = central_diff(|p| p[0].iter().map(|v| v * v).sum(), &params, 1e-3);
        for (got, x) in g[0].iter().zip(&params[0]) {
            assert!(rel_err(*got, 2.0 * x) < 1e-6);
        }
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert!(rel_err(0.0, 1e-9) < 1e-6);
        assert!(rel_err(1.0, 1.1) > 0.05);
    }
}
