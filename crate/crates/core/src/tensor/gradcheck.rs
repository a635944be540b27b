//! Central-difference utilities. These evaluate the loss through forward
//! passes only, so they are independent of the backward implementation they
//! are used to check.

use ndarray::ArrayD;

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error over two equally-shaped gradient tensors.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to every entry of `x0`.
/// `f` receives the perturbed tensor and must return the scalar loss.
pub fn entrywise_fd(f: &mut dyn FnMut(&ArrayD<f64>) -> f64, x0: &ArrayD<f64>, h: f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let orig = x.as_slice_mut().unwrap()[idx];
        x.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&x);
        x.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&x);
        x.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central-difference directional derivative of `f` at `x0` along `v`.
pub fn directional_fd(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x0: &ArrayD<f64>,
    v: &ArrayD<f64>,
    h: f64,
) -> f64 {
    let xp = x0 + &(v * h);
    let xm = x0 - &(v * h);
    (f(&xp) - f(&xm)) / (2.0 * h)
}
