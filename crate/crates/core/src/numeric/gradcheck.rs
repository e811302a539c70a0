//! Central finite-difference validation of tape gradients.

use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over every checked element.
    pub max_rel_error: f64,
    /// Worst relative error per parameter name.
    pub per_param: BTreeMap<String, f64>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e−8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` against `(f(p+h) − f(p−h)) / 2h` for
/// every element of every parameter in `store`.
///
/// `f` must build its objective from the store it is handed; the store is
/// perturbed in place and restored element by element.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    grad_check_sampled(store, h, usize::MAX, f)
}

/// Like [`grad_check`], but checks at most `max_per_param` evenly spaced
/// elements of each parameter.
pub fn grad_check_sampled<F>(
    store: &mut ParamStore,
    h: f64,
    max_per_param: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let loss = f(store, &mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::Evaluation("objective is not finite".into()));
        }
        g.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        for (id, gr) in g.param_grads() {
            grads[id.0].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
        }
        grads
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: BTreeMap::new(),
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_per_param.min(n).max(1));
        let mut worst: f64 = 0.0;
        for j in (0..n).step_by(stride.max(1)) {
            let orig = store.get(id).values()[j];
            store.get_mut(id).values_mut()[j] = orig + h;
            let plus = eval(store, &f);
            store.get_mut(id).values_mut()[j] = orig - h;
            let minus = eval(store, &f);
            store.get_mut(id).values_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            worst = worst.max(relative_error(analytic[id.0][j], numeric));
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(store.name(id).to_string(), worst);
    }
    Ok(report)
}
