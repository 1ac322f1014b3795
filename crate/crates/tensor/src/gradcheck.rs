//! Central finite-difference checks against [`Graph::backward`](crate::Graph::backward).

use crate::{Graph, Tensor, TensorError, Var};

/// Worst relative error between analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub input: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Relative error with an absolute floor, so entries whose true gradient is
/// essentially zero are compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares autodiff gradients of `build` with central differences.
///
/// `build` receives a fresh graph and one parameter handle per entry of
/// `inputs` and must return a scalar loss.
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<Vec<GradReport>, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        let mut worst_rel: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for k in 0..inputs[idx].len() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[k] += step;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[k] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.data()[k];
            worst_rel = worst_rel.max(rel_err(a, numeric));
            worst_abs = worst_abs.max((a - numeric).abs());
        }
        reports.push(GradReport {
            input: idx,
            max_rel_err: worst_rel,
            max_abs_err: worst_abs,
        });
    }
    Ok(reports)
}
