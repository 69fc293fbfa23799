use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub entries_checked: usize,
    /// Parameters marked frozen, with the largest |analytic gradient| seen.
    pub frozen_max_grad: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.frozen_max_grad.iter().all(|(_, g)| *g == 0.0)
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Checks every parameter entry of `store` against central finite differences.
///
/// `loss_fn` must build a scalar loss and be deterministic.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, mut loss_fn: F, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store)?;
    let analytic: Vec<Vec<T>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).data()[0].to_f64_lossy())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        entries_checked: 0,
        frozen_max_grad: Vec::new(),
        tolerance,
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if store.get(id).frozen {
            let m = analytic[pi].iter().fold(0.0f64, |m, g| m.max(g.to_f64_lossy().abs()));
            report.frozen_max_grad.push((store.get(id).name.clone(), m));
            continue;
        }
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            let h = T::lit(FD_STEP);
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let lp = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let lm = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic[pi][k].to_f64_lossy();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = Some(store.get(id).name.clone());
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
