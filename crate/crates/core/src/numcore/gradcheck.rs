//! Central finite-difference gradient checking.

/// Relative error per coordinate, `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `loss_fn` returns the loss and its analytic gradient at the given point; it
/// must be deterministic (any noise it uses has to be frozen by the caller).
pub fn relative_errors<F>(mut loss_fn: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut point = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + step;
        let (plus, _) = loss_fn(&point);
        point[i] = orig - step;
        let (minus, _) = loss_fn(&point);
        point[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        errors.push((a - numeric).abs() / denom);
    }
    errors
}

pub fn grad_check<F>(loss_fn: F, params: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    relative_errors(loss_fn, params, step).into_iter().fold(0.0, f64::max)
}
