use std::rc::Rc;

use autodiff::{Array, BoundParams, CsrMatrix, Graph, Var};

use super::forward::ForwardOutput;
use super::Model;
use crate::error::{Error, Result};

/// Supervision for one period. `weights` are per-block sample weights
/// (resampling multiplicities); zero-weight blocks do not contribute to the
/// classification and regression terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTargets<'a> {
    pub classes: &'a [usize],
    pub delta_true: &'a [f64],
    pub weights: &'a [f64],
}

/// Loss components as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub diff: Option<Var>,
}

/// `lambda * (mean over N+ of (d - a+ (L d))^2 + mean over N- of (d - a- (L d))^2)`
/// where N+ and N- are the blocks with strictly positive and negative `d`.
/// An empty side contributes nothing.
pub fn diffusion_loss(
    g: &mut Graph,
    delta: Var,
    laplacian: Rc<CsrMatrix>,
    a_plus: Var,
    a_minus: Var,
    lambda: f64,
) -> Result<Var> {
    let d = g.value(delta).data().to_vec();
    let n = d.len();
    let lap = g.spmm(laplacian, delta)?;
    let mut total: Option<Var> = None;
    for (positive, coef) in [(true, a_plus), (false, a_minus)] {
        let member = |x: f64| if positive { x > 0.0 } else { x < 0.0 };
        let count = d.iter().filter(|&&x| member(x)).count();
        if count == 0 {
            continue;
        }
        let w = 1.0 / count as f64;
        let mask = Array::vector(d.iter().map(|&x| if member(x) { w } else { 0.0 }).collect());
        let scaled = g.mul(lap, coef)?;
        let res = g.sub(delta, scaled)?;
        let sq = g.square(res);
        let mask = g.constant(mask);
        let side = g.mul(sq, mask)?;
        let side = g.sum(side);
        total = Some(match total {
            None => side,
            Some(t) => g.add(t, side)?,
        });
    }
    Ok(match total {
        Some(t) => g.scale(t, lambda),
        None => {
            debug_assert!(n == 0 || d.iter().all(|&x| x == 0.0));
            g.constant(Array::scalar(0.0))
        }
    })
}

impl Model {
    /// `lambda_cls * L_cls + lambda_reg * L_reg + L_diff`, the last gated by
    /// `use_diffusion_loss`.
    pub fn total_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        out: &ForwardOutput,
        targets: LossTargets<'_>,
        laplacian: Rc<CsrMatrix>,
    ) -> Result<LossParts> {
        let n = g.shape(out.delta)[0];
        if targets.classes.len() != n || targets.delta_true.len() != n || targets.weights.len() != n {
            return Err(Error::Data(format!(
                "{n} predictions but {} labels, {} targets and {} weights",
                targets.classes.len(),
                targets.delta_true.len(),
                targets.weights.len()
            )));
        }
        let total_weight: f64 = targets.weights.iter().sum();
        if !(total_weight > 0.0) {
            return Err(Error::Data("loss needs at least one positively weighted block".into()));
        }

        let cls = g.softmax_cross_entropy(out.logits, targets.classes, targets.weights)?;
        let truth = g.constant(Array::vector(targets.delta_true.to_vec()));
        let err = g.sub(out.delta, truth)?;
        let sq = g.square(err);
        let w = g.constant(Array::vector(targets.weights.iter().map(|w| w / total_weight).collect()));
        let reg = g.mul(sq, w)?;
        let reg = g.sum(reg);

        let a = g.scale(cls, self.config.lambda_cls);
        let b = g.scale(reg, self.config.lambda_reg);
        let mut total = g.add(a, b)?;
        let diff = if self.config.use_diffusion_loss {
            let d = diffusion_loss(
                g,
                out.delta,
                laplacian,
                p.var("diffusion.a_plus")?,
                p.var("diffusion.a_minus")?,
                self.config.lambda_diff,
            )?;
            total = g.add(total, d)?;
            Some(d)
        } else {
            None
        };
        Ok(LossParts { total, cls, reg, diff })
    }
}
