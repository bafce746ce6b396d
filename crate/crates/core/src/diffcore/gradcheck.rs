//! Central finite-difference comparison against analytic gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{Gradients, ParameterStore};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < self.tolerance))
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Analytic gradients of the scalar built by `loss`.
pub fn analytic_gradients<F>(store: &ParameterStore, loss: &F) -> Result<Gradients>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let l = loss(&mut g)?;
    g.backward(l)
}

fn loss_value<F>(store: &ParameterStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let l = loss(&mut g)?;
    Ok(g.value(l).data()[0])
}

/// Compare `analytic` with central differences of `loss` on every scalar of every parameter.
pub fn compare_gradients<F>(
    label: &str,
    store: &mut ParameterStore,
    analytic: &Gradients,
    loss: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut params = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.value(id).len();
        let mut worst = (0.0_f64, 0usize);
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let up = loss_value(store, &loss)?;
            store.value_mut(id).data_mut()[k] = orig - step;
            let down = loss_value(store, &loss)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            let err = relative_error(a, numeric);
            if !(err <= worst.0) {
                worst = (err, k);
            }
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            entries: n,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        step,
        tolerance: DEFAULT_TOLERANCE,
        params,
    })
}

pub fn gradient_check<F>(label: &str, store: &mut ParameterStore, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &loss)?;
    compare_gradients(label, store, &analytic, loss, DEFAULT_STEP)
}
