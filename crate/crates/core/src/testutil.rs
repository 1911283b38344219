//! Helpers shared by unit tests.

use nalgebra::DVector;

/// Central-difference gradient with step `h`.
pub fn central_difference(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_iterator(
        at.len(),
        (0..at.len()).map(|k| {
            let mut up = at.clone();
            let mut down = at.clone();
            up[k] += h;
            down[k] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        }),
    )
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}
