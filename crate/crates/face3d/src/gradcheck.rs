//! Central finite differences, used throughout the test suites as the
//! independent oracle for analytic gradients.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_diff<F>(x: &ArrayD<f64>, step: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + step;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest relative deviation between two arrays:
/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_rel_error");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Relative deviation in the infinity norm: `max_i |a_i - b_i|` divided by
/// the largest entry magnitude of either array. The right comparison when
/// individual entries may be arbitrarily small but the vectors share a scale.
pub fn inf_norm_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in inf_norm_rel_error");
    let max_err = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b.iter())
        .map(|&x| x.abs())
        .fold(f64::MIN_POSITIVE, f64::max);
    max_err / scale
}
