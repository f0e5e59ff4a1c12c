use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Largest relative discrepancy between `analytic` and central differences of
/// `f` around `params`, with relative error
/// `|a - c| / max(1e-8, |a| + |c|)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x)?;
        x[i] = orig - eps;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let central = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - central).abs() / (a.abs() + central.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Per-tensor [`finite_diff_check`] over every parameter in `store`.
///
/// `loss` evaluates the objective for a store; `grads` holds the analytic
/// gradient for each parameter (missing entries are taken as zero).
pub fn check_store(
    store: &ParamStore,
    grads: &[(ParamId, Vec<f64>)],
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<(String, f64)>> {
    let mut report = Vec::new();
    for (id, name, tensor) in store.iter() {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; tensor.len()]);
        let mut work = store.clone();
        let err = finite_diff_check(
            |x| {
                work.get_mut(id).values_mut().copy_from_slice(x);
                loss(&work)
            },
            tensor.values(),
            &analytic,
            eps,
        )?;
        report.push((name.to_string(), err));
    }
    Ok(report)
}
