//! Central finite-difference verification of reverse-mode gradients.

use crate::error::AdResult;
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamSet};

/// Gradients smaller than this in magnitude are compared absolutely rather
/// than relatively; central differences carry roundoff of order
/// `eps * |loss| / h`, which a pure ratio would amplify near zero.
pub const RELATIVE_FLOOR: f64 = 1.0;

/// Per-parameter outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error > self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the reverse-mode gradient of `loss_fn` with central differences
/// of step `h` for every element of every parameter.
///
/// `loss_fn` must build a scalar loss on the supplied graph from the bound
/// parameters and must be deterministic.
pub fn gradcheck<F>(params: &ParamSet, h: f64, tol: f64, loss_fn: F) -> AdResult<GradCheckReport>
where
    F: Fn(&mut Graph, &BoundParams) -> AdResult<Var>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = loss_fn(&mut graph, &bound)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<_> =
        params.iter().zip(bound.vars()).map(|((_, p), &v)| grads.get_or_zeros(v, p.shape())).collect();
    drop(graph);

    let eval = |set: &ParamSet| -> AdResult<f64> {
        let mut g = Graph::new();
        let b = set.bind(&mut g);
        let l = loss_fn(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut perturbed = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = Vec::with_capacity(names.len());
    for (name, analytic) in names.iter().zip(&analytic) {
        let mut check =
            ParamCheck { name: name.clone(), max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for idx in 0..analytic.len() {
            let original = perturbed.get(name)?.data()[idx];
            perturbed.get_mut(name)?.data_mut()[idx] = original + h;
            let plus = eval(&perturbed)?;
            perturbed.get_mut(name)?.data_mut()[idx] = original - h;
            let minus = eval(&perturbed)?;
            perturbed.get_mut(name)?.data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            if idx == 0 || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { tol, params: report })
}
