//! The spatio-temporal network: disaster-biased temporal attention, a
//! relation-aware graph attention encoder, fusion and the two output heads.

mod decay;
mod forward;
mod io;
mod loss;
pub mod toy;

use autodiff::{Array, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ChangeClass;
use crate::error::{Error, Result};

pub use decay::{decay_matrix, DecayOp};
pub use forward::{argmax_class, positional_encoding, ForwardOutput, GraphTensors, PeriodBatch};
pub use io::{read_params, write_params, ParamEntry};
pub use loss::{diffusion_loss, LossParts, LossTargets};

/// Channels of the per-week input: visits, active POIs, resilience and three
/// weather series.
pub const TEMPORAL_FEATURES: usize = 6;

/// Initial decay half-life in weeks.
pub const INITIAL_HALF_LIFE: f64 = 4.0;

/// Initial value of both diffusion coefficients.
pub const INITIAL_DIFFUSION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub gat_heads: usize,
    pub leaky_slope: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_diff: f64,
    pub use_disaster_bias: bool,
    pub use_diffusion_loss: bool,
    pub use_multi_relation: bool,
    /// One GAT shared by all relations plus a learned per-relation input
    /// offset, instead of a dedicated GAT per relation.
    pub share_gat: bool,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            attention_heads: 4,
            gat_heads: 2,
            leaky_slope: 0.2,
            lambda_cls: 1.0,
            lambda_reg: 1.0,
            lambda_diff: 0.05,
            use_disaster_bias: true,
            use_diffusion_loss: true,
            use_multi_relation: true,
            share_gat: false,
            epochs: 60,
            lr: 0.005,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.attention_heads == 0 || self.gat_heads == 0 {
            return bad("hidden_dim, attention_heads and gat_heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            ));
        }
        for (name, v) in
            [("lambda_cls", self.lambda_cls), ("lambda_reg", self.lambda_reg), ("lambda_diff", self.lambda_diff)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.attention_heads
    }
}

/// Input sizes a parameter set is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub z_dim: usize,
    /// Relations in the graph, adjacency included.
    pub n_relations: usize,
}

/// Configuration, sizes and the learnable parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: ParamSet,
}

/// Output for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub block_id: String,
    pub delta_y_hat: f64,
    pub class_logits: [f64; 3],
    pub class: ChangeClass,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

/// Initialization stream of one parameter, keyed by its name so a tensor
/// starts from the same values whichever other tensors a variant has.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a, stable across platforms and releases
    let key = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// `theta` with `softplus(theta) = alpha`.
pub fn inverse_softplus(alpha: f64) -> f64 {
    alpha + (-(-alpha).exp_m1()).ln()
}

impl Model {
    /// Fresh parameters: Glorot-uniform weights, zero biases, a four-week
    /// decay half-life and diffusion coefficients of 0.1.
    pub fn new(config: ModelConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        if dims.n_relations == 0 {
            return Err(Error::Config("the graph must have at least one relation".into()));
        }
        let h = config.hidden_dim;
        let dh = config.head_dim();
        let seed = config.seed;
        let mut p = ParamSet::new();
        let weight = |p: &mut ParamSet, name: String, rows: usize, cols: usize| {
            let init = glorot(&mut param_rng(seed, &name), rows, cols);
            p.insert(name, init)
        };

        weight(&mut p, "temporal.w_in".into(), TEMPORAL_FEATURES, h)?;
        p.insert("temporal.b_in", Array::zeros(&[h]))?;
        for head in 0..config.attention_heads {
            for name in ["w_q", "w_k", "w_v"] {
                weight(&mut p, format!("temporal.head{head}.{name}"), h, dh)?;
            }
        }
        weight(&mut p, "temporal.w_o".into(), h, h)?;
        p.insert("temporal.b_o", Array::zeros(&[h]))?;
        let theta = inverse_softplus(std::f64::consts::LN_2 / INITIAL_HALF_LIFE);
        p.insert("decay.theta", Array::vector(vec![theta]))?;

        weight(&mut p, "node.w_in".into(), dims.z_dim + h, h)?;
        p.insert("node.b_in", Array::zeros(&[h]))?;

        let used = if config.use_multi_relation { dims.n_relations } else { 1 };
        let gat_sets: Vec<String> =
            if config.share_gat { vec!["gat.shared".into()] } else { (0..used).map(|r| format!("gat.r{r}")).collect() };
        for set in &gat_sets {
            for head in 0..config.gat_heads {
                weight(&mut p, format!("{set}.head{head}.w"), h, h)?;
                weight(&mut p, format!("{set}.head{head}.a_self"), h, 1)?;
                weight(&mut p, format!("{set}.head{head}.a_neigh"), h, 1)?;
                p.insert(format!("{set}.head{head}.u"), Array::vector(vec![0.0]))?;
            }
        }
        if config.share_gat {
            for r in 0..used {
                p.insert(format!("gat.r{r}.embed"), Array::zeros(&[h]))?;
            }
        }
        if used > 1 {
            weight(&mut p, "relation.w_a".into(), h, h)?;
            weight(&mut p, "relation.w_a_vec".into(), h, 1)?;
        }

        weight(&mut p, "fusion.w".into(), 2 * h, h)?;
        p.insert("fusion.b", Array::zeros(&[h]))?;
        weight(&mut p, "head.reg.w".into(), h, 1)?;
        p.insert("head.reg.b", Array::zeros(&[1]))?;
        weight(&mut p, "head.cls.w".into(), h, 3)?;
        p.insert("head.cls.b", Array::zeros(&[3]))?;
        p.insert("diffusion.a_plus", Array::vector(vec![INITIAL_DIFFUSION]))?;
        p.insert("diffusion.a_minus", Array::vector(vec![INITIAL_DIFFUSION]))?;

        Ok(Self { config, dims, params: p })
    }

    /// Relations the forward pass reads: all of them, or only adjacency
    /// when multi-relation attention is off.
    pub fn relations_used(&self) -> usize {
        if self.config.use_multi_relation {
            self.dims.n_relations
        } else {
            1
        }
    }

    /// Current decay rate, `softplus(theta)`.
    pub fn alpha(&self) -> f64 {
        let theta = self.params.get("decay.theta").map(|a| a.data()[0]).unwrap_or(0.0);
        autodiff::kernels::softplus(theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_softplus_round_trips() {
        for alpha in [1e-3, 0.17, 1.0, 5.0] {
            let back = autodiff::kernels::softplus(inverse_softplus(alpha));
            assert!((back - alpha).abs() < 1e-14 * alpha.max(1.0), "{alpha} -> {back}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { attention_heads: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { lambda_diff: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_relation_model_has_no_sector_parameters() {
        let config = ModelConfig { use_multi_relation: false, ..Default::default() };
        let m = Model::new(config, ModelDims { z_dim: 3, n_relations: 5 }).unwrap();
        assert!(m.params.names().all(|n| !n.starts_with("gat.r1") && !n.starts_with("relation.")));
        assert!((m.alpha() - std::f64::consts::LN_2 / 4.0).abs() < 1e-15);
    }
}
