//! Central finite differences against analytic gradients, in `f64`.

use super::params::Params;

/// Denominator floor so that near-zero gradients are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every element of every tensor of `params` against central differences of `loss`.
pub fn check_params<P, F>(params: &P, analytic: &P, loss: F) -> Vec<GradCheck>
where
    P: Params<f64>,
    F: Fn(&P) -> f64,
{
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, t)| t.data.clone())
        .collect();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = grads[ti].len();
        let mut report = GradCheck {
            name,
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for j in 0..len {
            let orig = work.tensors_mut()[ti].data[j];
            work.tensors_mut()[ti].data[j] = orig + DEFAULT_STEP;
            let lp = loss(&work);
            work.tensors_mut()[ti].data[j] = orig - DEFAULT_STEP;
            let lm = loss(&work);
            work.tensors_mut()[ti].data[j] = orig;
            let numeric = (lp - lm) / (2.0 * DEFAULT_STEP);
            let e = rel_err(grads[ti][j], numeric);
            if e > report.max_rel_err || !e.is_finite() {
                report.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
                report.worst_index = j;
            }
            report.checked += 1;
        }
        out.push(report);
    }
    out
}

/// Checks the gradient of `loss` with respect to a flat input vector.
pub fn check_vector<F>(name: &str, x: &[f64], analytic: &[f64], loss: F) -> GradCheck
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut work = x.to_vec();
    let mut report = GradCheck {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for j in 0..x.len() {
        let orig = work[j];
        work[j] = orig + DEFAULT_STEP;
        let lp = loss(&work);
        work[j] = orig - DEFAULT_STEP;
        let lm = loss(&work);
        work[j] = orig;
        let e = rel_err(analytic[j], (lp - lm) / (2.0 * DEFAULT_STEP));
        if e > report.max_rel_err || !e.is_finite() {
            report.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            report.worst_index = j;
        }
        report.checked += 1;
    }
    report
}

pub fn worst(reports: &[GradCheck]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
