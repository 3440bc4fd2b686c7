//! Central finite-difference oracle for the reverse pass.
//!
//! Everything here runs in 64-bit and re-evaluates the forward function from
//! scratch for every perturbation, so it shares nothing with the analytic
//! backward rules it checks.

use super::{Graph, ParamStore, Precision, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Norm-wise relative error between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn).max(1e-7);
    diff / denom
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// One entry per checked input or parameter.
    pub errors: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Checks gradients of a scalar function of free input matrices.
pub fn check_inputs<F>(inputs: &[(usize, usize, Vec<f64>)], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[(usize, usize, Vec<f64>)]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let vars = vals
            .iter()
            .map(|(r, c, d)| g.input(*r, *c, d.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };
    let mut g = Graph::new(Precision::F64);
    let vars = inputs
        .iter()
        .map(|(r, c, d)| g.input(*r, *c, d.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut errors = Vec::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].2.len()]);
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let orig = work[k].2[i];
            work[k].2[i] = orig + step;
            let fp = eval(&work)?;
            work[k].2[i] = orig - step;
            let fm = eval(&work)?;
            work[k].2[i] = orig;
            numeric[i] = (fp - fm) / (2.0 * step);
        }
        errors.push((format!("input{k}"), relative_error(&analytic, &numeric)));
    }
    Ok(GradCheck { errors })
}

/// Checks gradients with respect to named parameters of a 64-bit store.
///
/// At most `max_elems` entries per parameter are perturbed, spread evenly.
pub fn check_params<F>(store: &ParamStore, names: &[String], step: f64, max_elems: usize, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new(Precision::F64);
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    for (_, t) in analytic_store.iter_mut() {
        t.grad = None;
    }
    grads.accumulate_into(&g, &mut analytic_store)?;

    let mut work = store.clone();
    let mut errors = Vec::new();
    for name in names {
        let n = store.get(name)?.len();
        let full = analytic_store.get(name)?.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_elems.max(1)).max(1);
        let picks: Vec<usize> = (0..n).step_by(stride).collect();
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = store.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + step;
            let mut gp = Graph::new(Precision::F64);
            let lp = build(&mut gp, &work)?;
            let fp = gp.scalar(lp);
            work.get_mut(name)?.data_mut()[i] = orig - step;
            let mut gm = Graph::new(Precision::F64);
            let lm = build(&mut gm, &work)?;
            let fm = gm.scalar(lm);
            work.get_mut(name)?.data_mut()[i] = orig;
            analytic.push(full[i]);
            numeric.push((fp - fm) / (2.0 * step));
        }
        errors.push((name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(GradCheck { errors })
}
