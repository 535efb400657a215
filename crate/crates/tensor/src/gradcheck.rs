//! Central finite-difference gradient checking.

use crate::matrix::Matrix;

/// Per-tensor and overall agreement between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error within each parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` with step
/// `delta`. Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor
/// keeps entries whose true gradient is ~0 from dividing by round-off.
pub fn grad_check(
    loss: impl Fn(&[Matrix]) -> f64,
    params: &[Matrix],
    analytic: &[Matrix],
    delta: f64,
    tol: f64,
) -> GradCheckReport {
    grad_check_with_floor(loss, params, analytic, delta, tol, 1e-5)
}

pub fn grad_check_with_floor(
    loss: impl Fn(&[Matrix]) -> f64,
    params: &[Matrix],
    analytic: &[Matrix],
    delta: f64,
    tol: f64,
    floor: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut work: Vec<Matrix> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (i, a) in analytic.iter().enumerate() {
        assert_eq!(a.shape(), params[i].shape(), "gradient shape of parameter {i}");
        let mut worst = 0.0_f64;
        for k in 0..params[i].len() {
            let orig = params[i].as_slice()[k];
            work[i].as_mut_slice()[k] = orig + delta;
            let up = loss(&work);
            work[i].as_mut_slice()[k] = orig - delta;
            let down = loss(&work);
            work[i].as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * delta);
            let exact = a.as_slice()[k];
            let denom = exact.abs().max(numeric.abs()).max(floor);
            let rel = (exact - numeric).abs() / denom;
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        per_param,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_has_no_error() {
        let x = [0.5, -1.5, 2.0];
        let loss = |p: &[Matrix]| p[0].as_slice().iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        let w = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let report = grad_check(loss, &[w], &[Matrix::row_vector(&x)], 1e-5, 1e-4);
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_fails() {
        let loss = |p: &[Matrix]| p[0].as_slice().iter().map(|w| w * w).sum::<f64>();
        let w = Matrix::row_vector(&[1.0, 2.0]);
        let report = grad_check(loss, &[w], &[Matrix::row_vector(&[2.0, 3.0])], 1e-5, 1e-4);
        assert!(!report.passed);
        assert!(report.per_param[0] > 0.2);
    }
}
