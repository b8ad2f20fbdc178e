//! Central finite-difference oracle for graph gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`]. Errors are per parameter tensor:
/// `‖analytic − numeric‖∞ / max(1e-8, ‖numeric‖∞)`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Checks every parameter of `store`.
pub fn grad_check<F>(store: &mut ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, step, f)
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences of step `step` for the listed parameters.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    step: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let first = eval(&mut f, store)?;
    let second = eval(&mut f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let saved: Vec<Tensor> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    store.zero_grad();
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        g.backward(root, store)?;
        ids.iter().map(|&id| store.grad(id).clone()).collect()
    };
    store.zero_grad();
    for (&id, g) in ids.iter().zip(&saved) {
        store.accumulate(id, g);
    }

    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel_error: f64 = 0.0;
    for (&id, analytic) in ids.iter().zip(&analytic) {
        let n = store.value(id).len();
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let plus = eval(&mut f, store);
            store.value_mut(id).data_mut()[k] = orig - step;
            let minus = eval(&mut f, store);
            store.value_mut(id).data_mut()[k] = orig;
            numeric.push((plus? - minus?) / (2.0 * step));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let rel = diff / scale;
        max_rel_error = max_rel_error.max(rel);
        per_param.push((store.name(id).to_string(), rel));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
    })
}

fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "checked function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
