use super::{AutodiffError, Result, Tensor};

/// Outcome of comparing analytic gradients against central differences.
///
/// The relative error of one entry is `|analytic − numeric| / max(1, |analytic|, |numeric|)`,
/// i.e. absolute below unit magnitude and relative above it.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

pub(crate) fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Checks `∂f/∂x` for a leaf `x`. `f` is re-evaluated `2·len(x)` times with
/// one entry perturbed by `±step`; it must be deterministic.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let was_tracking = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();
    let loss = f(x)?;
    if loss.len() != 1 {
        x.set_requires_grad(was_tracking);
        return Err(AutodiffError::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;
    let analytic = x.grad().clone();
    drop(loss);

    let mut numeric = vec![0.0; x.len()];
    for (k, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + step;
        let plus = f(x)?.item();
        x.data_mut()[k] = orig - step;
        let minus = f(x)?.item();
        x.data_mut()[k] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    x.zero_grad();
    x.set_requires_grad(was_tracking);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        analytic,
        numeric,
        tol,
        passed: true,
    };
    for k in 0..report.analytic.len() {
        let (a, n) = (report.analytic[k], report.numeric[k]);
        let rel = rel_error(a, n);
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = k;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
