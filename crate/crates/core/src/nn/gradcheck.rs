use serde::Serialize;

use super::{Gradients, ParamStore};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest relative error per parameter tensor, in store order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares `analytic` with central differences of `loss` on every scalar
/// parameter. `loss` must be a pure function of the store.
pub fn gradient_check<F>(params: &ParamStore, analytic: &Gradients, loss: F) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    gradient_check_with_step(params, analytic, loss, FD_STEP)
}

/// [`gradient_check`] with an explicit difference step.
pub fn gradient_check_with_step<F>(
    params: &ParamStore,
    analytic: &Gradients,
    loss: F,
    h: f64,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        per_param: Vec::new(),
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let mut worst_here: f64 = 0.0;
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(&work);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            worst_here = worst_here.max(err);
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report
            .per_param
            .push((params.name(id).to_string(), worst_here));
    }
    report
}
