use super::{Real, Tensor};

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, step: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = step + step;
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / two_h);
    }
    Tensor::from_vec(x.shape().to_vec(), grad).expect("shape preserved")
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps near-zero
/// coordinates from turning roundoff into large relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    let err = (a - b).abs() / denom;
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

/// Largest [`relative_error`] over paired elements; infinite on shape mismatch.
pub fn max_relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x.as_f64(), y.as_f64(), floor))
        .fold(0.0, f64::max)
}
