//! Central finite-difference gradient verification.

use super::graph::{GradientMap, GraphError, ParamSet};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare the analytic gradient of `f` against central finite differences.
///
/// `f` evaluates a scalar loss on a parameter set and returns the analytic
/// gradient alongside it. Each coordinate is perturbed by +-`step`; relative
/// error uses |a - n| / max(1, |a|, |n|).
pub fn grad_check<F>(
    f: F,
    params: &ParamSet,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GraphError>
where
    F: Fn(&ParamSet) -> Result<(f64, GradientMap), GraphError>,
{
    if step <= 0.0 {
        return Err(GraphError::Invalid(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = f(params)?;

    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut count = 0usize;

    let zero_grad = |t: &crate::autodiff::Tensor| crate::autodiff::Tensor::zeros(t.shape().to_vec());
    for (name, base) in params.iter() {
        // a parameter absent from the gradient map never entered the graph;
        // its analytic gradient is identically zero
        let absent = zero_grad(base);
        let grad = analytic.get(name).unwrap_or(&absent);
        for i in 0..base.len() {
            let orig = base.data()[i];
            let eval_at = |v: f64| -> Result<f64, GraphError> {
                let mut perturbed = params.clone();
                perturbed.get_mut(name).unwrap().data_mut()[i] = v;
                let (loss, _) = f(&perturbed).map_err(|e| {
                    GraphError::Invalid(format!(
                        "non-finite at perturbed coordinate {name}[{i}]: {e}"
                    ))
                })?;
                if !loss.is_finite() {
                    return Err(GraphError::Invalid(format!(
                        "non-finite loss at perturbed coordinate {name}[{i}]"
                    )));
                }
                Ok(loss)
            };
            let plus = eval_at(orig + step)?;
            let minus = eval_at(orig - step)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / f64::max(1.0, f64::max(a.abs(), numeric.abs()));
            max_rel = max_rel.max(rel);
            sum_rel += rel;
            count += 1;
        }
    }

    let mean_rel = if count > 0 { sum_rel / count as f64 } else { 0.0 };
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        mean_rel_err: mean_rel,
        coords_checked: count,
        tolerance,
        passed: max_rel <= tolerance,
    })
}
