//! Central-difference gradient checking, used throughout the test suites to
//! pin analytic backward rules against numerically differentiated losses.

use super::tensor::Tensor;

/// Numerically differentiate `eval` with respect to every element of `at`
/// using central differences with step `h`. `eval` must be a pure function of
/// the tensor it is handed.
pub fn fd_gradient(
    mut eval: impl FnMut(&Tensor<f64>) -> f64,
    at: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = Tensor::zeros(at.shape());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let x0 = at.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = eval(&probe);
        probe.data_mut()[i] = x0 - h;
        let fm = eval(&probe);
        probe.data_mut()[i] = x0;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Compare tensors elementwise with a mixed relative/absolute criterion:
/// `|a-b| <= rel_tol * max(|a|,|b|) + abs_floor`. Returns the worst offender
/// on failure.
pub fn grads_close(
    analytic: &Tensor<f64>,
    numeric: &Tensor<f64>,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<(), String> {
    if analytic.shape() != numeric.shape() {
        return Err(format!(
            "gradient shape mismatch: {:?} vs {:?}",
            analytic.shape(),
            numeric.shape()
        ));
    }
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for i in 0..analytic.len() {
        let a = analytic.data()[i];
        let b = numeric.data()[i];
        let err = (a - b).abs();
        let bound = rel_tol * a.abs().max(b.abs()) + abs_floor;
        if err > bound {
            let excess = err / bound;
            if worst.map_or(true, |(_, _, _, e)| excess > e) {
                worst = Some((i, a, b, excess));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((i, a, b, _)) => Err(format!(
            "gradient mismatch at flat index {i}: analytic {a:.9e} vs numeric {b:.9e} \
             (rel_tol {rel_tol:.1e}, abs_floor {abs_floor:.1e})"
        )),
    }
}

/// Panic with a diagnostic if the gradients disagree. `abs_floor` is fixed at
/// 1e-9 — gradients smaller than that are numerically indistinguishable from
/// zero at f64 central-difference accuracy.
pub fn assert_grads_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, rel_tol: f64) {
    if let Err(msg) = grads_close(analytic, numeric, rel_tol, 1e-9) {
        panic!("{msg}");
    }
}
