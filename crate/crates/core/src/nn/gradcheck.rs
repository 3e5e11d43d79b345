//! Central finite-difference gradient checking.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, with 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = norm_a + norm_n;
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Relative error between `analytic` and the central-difference gradient.
pub fn check<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    relative_error(analytic, &numeric_grad(f, x, h))
}
