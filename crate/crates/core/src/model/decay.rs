use std::rc::Rc;

use autodiff::{Array, CustomOp, Graph, Var};

use crate::resilience::{decay_sequence, decay_sequence_alpha_derivative};

/// Disaster decay sequences for every block as a differentiable function of
/// the scalar decay rate. Input: `alpha` of shape `[1]`; output `[n, t]`.
pub struct DecayOp {
    events: Rc<Vec<Vec<(usize, f64)>>>,
    t: usize,
}

impl DecayOp {
    pub fn new(events: Rc<Vec<Vec<(usize, f64)>>>, t: usize) -> Self {
        Self { events, t }
    }

    /// Applies the op to `alpha` on `graph`.
    pub fn apply(self, graph: &mut Graph, alpha: Var) -> Var {
        let a = graph.value(alpha).data()[0];
        let value = decay_matrix(&self.events, a, self.t);
        graph.custom(Rc::new(self), &[alpha], value)
    }
}

/// Stacks per-block decay sequences into an `[n, t]` array.
pub fn decay_matrix(events: &[Vec<(usize, f64)>], alpha: f64, t: usize) -> Array {
    let mut data = Vec::with_capacity(events.len() * t);
    for ev in events {
        if ev.is_empty() {
            data.resize(data.len() + t, 0.0);
        } else {
            data.extend(decay_sequence(ev, alpha, t));
        }
    }
    Array::new(&[events.len(), t], data).expect("n * t values")
}

impl CustomOp for DecayOp {
    fn name(&self) -> &'static str {
        "decay_sequence"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let alpha = inputs[0].data()[0];
        let mut total = 0.0;
        for (ev, g) in self.events.iter().zip(grad.data().chunks(self.t)) {
            if ev.is_empty() {
                continue;
            }
            let deriv = decay_sequence_alpha_derivative(ev, alpha, self.t);
            total += deriv.iter().zip(g).map(|(d, g)| d * g).sum::<f64>();
        }
        vec![Some(Array::new(inputs[0].shape(), vec![total]).expect("scalar gradient"))]
    }
}
