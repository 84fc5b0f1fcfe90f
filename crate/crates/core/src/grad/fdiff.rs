/// Central-difference gradient of `f` at `x`:
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for each coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative discrepancy between two gradients. Entries whose
/// reference magnitude is below `floor` are compared absolutely.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let diff = (a - r).abs();
            let scale = a.abs().max(r.abs());
            if scale < floor {
                diff
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}
