//! Central finite-difference gradient checking.
//!
//! The numeric gradient only ever calls the loss forward, so it stays
//! independent of the analytic backward passes it is used to verify.

/// Central finite differences of `loss` at `params`, perturbing one
/// coordinate at a time: `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_difference_gradient(
    params: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    eps: f64,
) -> Vec<f64> {
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = loss(&work);
        work[i] = orig - eps;
        let minus = loss(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Element-wise relative error between analytic and numeric gradients, with
/// the denominator floored to keep near-zero entries from blowing up.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked: analytic.len(),
    }
}
