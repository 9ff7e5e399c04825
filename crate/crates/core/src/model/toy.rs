//! A tiny deterministic instance: six blocks, twelve weeks, adjacency plus
//! two sector relations. Used by gradient checks and property tests.

use std::rc::Rc;

use autodiff::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphTensors, Model, ModelConfig, ModelDims, PeriodBatch, TEMPORAL_FEATURES};
use crate::error::Result;
use crate::graphs::{build_multigraph, MultiRelationalGraph, Relation};

pub struct ToyInstance {
    pub model: Model,
    pub graph: MultiRelationalGraph,
    pub batch: PeriodBatch,
    pub classes: Vec<usize>,
    pub delta_true: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const TOY_BLOCKS: usize = 6;
pub const TOY_WEEKS: usize = 12;
pub const TOY_Z: usize = 3;

/// The toy graph. Block 0 has no edge in the second sector relation.
pub fn toy_graph() -> MultiRelationalGraph {
    let adjacency = Relation::new(
        "adjacency",
        [(0, 1, 0.5), (1, 2, 0.8), (2, 3, 0.4), (3, 4, 1.2), (4, 5, 0.7), (5, 0, 0.3), (1, 4, 0.25)],
    )
    .expect("valid");
    let s1 = Relation::new("sector_445", [(0, 1, 30.0), (0, 2, 4.0), (1, 3, 12.0)]).expect("valid");
    let s2 = Relation::new("sector_722", [(2, 5, 80.0), (3, 4, 2.5), (4, 5, 9.0)]).expect("valid");
    build_multigraph(TOY_BLOCKS, adjacency, vec![s1, s2]).expect("valid")
}

/// Builds the toy with `config`'s flags; dimensions are shrunk to keep
/// finite differences cheap.
pub fn toy_instance(config: ModelConfig, seed: u64) -> Result<ToyInstance> {
    let config = ModelConfig { hidden_dim: 8, attention_heads: 2, gat_heads: 2, ..config };
    let graph = toy_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array::new(
        &[TOY_BLOCKS, TOY_WEEKS, TEMPORAL_FEATURES],
        (0..TOY_BLOCKS * TOY_WEEKS * TEMPORAL_FEATURES).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )?;
    let z = Array::matrix(TOY_BLOCKS, TOY_Z, (0..TOY_BLOCKS * TOY_Z).map(|_| rng.random_range(-1.0..1.0)).collect());
    let events = vec![vec![(2, 1.5)], vec![(2, 0.7), (8, 2.0)], vec![], vec![(5, 1.0)], vec![(0, 0.4)], vec![]];
    let delta_true: Vec<f64> = (0..TOY_BLOCKS).map(|_| rng.random_range(-0.3..0.3)).collect();
    let classes = delta_true
        .iter()
        .map(|&d| {
            if d > 0.05 {
                0
            } else if d < -0.05 {
                2
            } else {
                1
            }
        })
        .collect();
    let weights = vec![1.0, 2.0, 0.0, 1.0, 1.0, 3.0];
    let dims = ModelDims { z_dim: TOY_Z, n_relations: graph.n_relations() };
    let model = Model::new(config, dims)?;
    let batch = PeriodBatch { x, z, events: Rc::new(events), graph: Rc::new(GraphTensors::new(&graph)) };
    Ok(ToyInstance { model, graph, batch, classes, delta_true, weights })
}
