//! Central finite-difference checking of graph gradients.

use crate::graph::{Graph, Var};
use crate::params::{Gradients, ParamId, ParamStore};

/// Worst mismatch found by [`check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with an absolute floor so gradients that are zero up to
/// rounding do not produce spurious failures.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences with step `h` for every entry of every parameter selected by
/// `select`.
pub fn check<F>(
    store: &ParamStore,
    f: F,
    h: f64,
    floor: f64,
    select: impl Fn(&str) -> bool,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let analytic: Gradients = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let loss = f(&mut g);
        g.value(loss).item()
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !select(&name) {
            continue;
        }
        for i in 0..store.get(id).len() {
            let orig = work.get(id).data[i];
            work.get_mut(id).data[i] = orig + h;
            let plus = eval(&work);
            work.get_mut(id).data[i] = orig - h;
            let minus = eval(&work);
            work.get_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data[i]);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    report
}
