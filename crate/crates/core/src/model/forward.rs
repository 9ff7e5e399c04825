use std::rc::Rc;

use autodiff::{Array, BoundParams, CsrMatrix, Graph, Var};

use super::decay::DecayOp;
use super::{Model, PredictionRecord, TEMPORAL_FEATURES};
use crate::data::ChangeClass;
use crate::error::{Error, Result};
use crate::graphs::{laplacian, MultiRelationalGraph};

/// Edge lists of one relation in the form the attention layer consumes:
/// directed edges both ways plus a self-loop per node, sorted by receiver.
#[derive(Clone, Debug)]
struct RelationTensors {
    dst: Rc<[usize]>,
    src: Rc<[usize]>,
    /// `log1p(weight)` per directed edge, 0 on self-loops.
    edge_feature: Array,
    /// True for nodes without any edge in this relation.
    isolated: Vec<bool>,
}

/// Graph structure prepared once per period.
#[derive(Clone, Debug)]
pub struct GraphTensors {
    n: usize,
    relations: Vec<RelationTensors>,
    laplacian: Rc<CsrMatrix>,
}

impl GraphTensors {
    pub fn new(graph: &MultiRelationalGraph) -> Self {
        let n = graph.n_nodes;
        let relations = graph
            .relations
            .iter()
            .map(|rel| {
                let mut edges: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 0.0)).collect();
                for &(i, j, w) in &rel.edges {
                    let f = w.ln_1p();
                    edges.push((i, j, f));
                    edges.push((j, i, f));
                }
                edges.sort_by_key(|a| (a.0, a.1));
                let has = rel.has_edges(n);
                RelationTensors {
                    dst: edges.iter().map(|e| e.0).collect(),
                    src: edges.iter().map(|e| e.1).collect(),
                    edge_feature: Array::vector(edges.iter().map(|e| e.2).collect()),
                    isolated: has.iter().map(|&h| !h).collect(),
                }
            })
            .collect();
        Self { n, relations, laplacian: Rc::new(laplacian(graph.adjacency(), n)) }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn laplacian(&self) -> &Rc<CsrMatrix> {
        &self.laplacian
    }

    /// Receiver of each directed edge (self-loops included) of relation `r`.
    pub fn receivers(&self, r: usize) -> &[usize] {
        &self.relations[r].dst
    }
}

/// Everything the network reads for one period.
#[derive(Clone, Debug)]
pub struct PeriodBatch {
    /// Standardized weekly features, `[n, t, 6]`.
    pub x: Array,
    /// Standardized static attributes, `[n, d]`.
    pub z: Array,
    /// Disaster events per block as `(local week, severity)`.
    pub events: Rc<Vec<Vec<(usize, f64)>>>,
    pub graph: Rc<GraphTensors>,
}

impl PeriodBatch {
    pub fn n_blocks(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn weeks(&self) -> usize {
        self.x.shape()[1]
    }

    fn check(&self, z_dim: usize) -> Result<()> {
        let s = self.x.shape();
        if s.len() != 3 || s[2] != TEMPORAL_FEATURES {
            return Err(Error::Data(format!("temporal input must be [n, t, {TEMPORAL_FEATURES}], got {s:?}")));
        }
        let n = s[0];
        if self.z.shape() != [n, z_dim] {
            return Err(Error::Data(format!("attributes must be [{n}, {z_dim}], got {:?}", self.z.shape())));
        }
        if self.events.len() != n || self.graph.n != n {
            return Err(Error::Data(format!(
                "{n} blocks but {} event lists and {} graph nodes",
                self.events.len(),
                self.graph.n
            )));
        }
        if !self.x.all_finite() || !self.z.all_finite() {
            return Err(Error::Numeric("non-finite model input".into()));
        }
        for ev in self.events.iter() {
            if let Some(&(w, d)) = ev.iter().find(|&&(w, d)| w >= s[1] || !(d >= 0.0 && d.is_finite())) {
                return Err(Error::Data(format!("disaster event at week {w} with severity {d} is invalid")));
            }
        }
        Ok(())
    }
}

/// Handles to the interesting nodes of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Predicted change, `[n]`, in (-1, 1).
    pub delta: Var,
    /// Class logits, `[n, 3]`.
    pub logits: Var,
    /// Decay sequences `[n, t]`, when the disaster bias is on.
    pub decay: Option<Var>,
    /// Per-node relation weights `[n, R]` when more than one relation is used.
    pub relation_weights: Option<Var>,
    /// Neighbourhood attention per relation and head, one value per directed
    /// edge in [`GraphTensors::receivers`] order.
    pub neighbourhood_weights: Vec<Vec<Var>>,
    pub h_temp: Var,
    pub h_spatial: Var,
}

/// Fixed sinusoidal encoding, `[t, width]`.
pub fn positional_encoding(t: usize, width: usize) -> Array {
    let mut data = vec![0.0; t * width];
    for pos in 0..t {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 / rate;
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Array::matrix(t, width, data)
}

impl Model {
    /// Builds the forward pass on `g` using the bound parameters `p`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, batch: &PeriodBatch) -> Result<ForwardOutput> {
        batch.check(self.dims.z_dim)?;
        if batch.graph.n_relations() < self.relations_used() {
            return Err(Error::Data(format!(
                "model expects {} relations, graph has {}",
                self.relations_used(),
                batch.graph.n_relations()
            )));
        }
        let (decay, h_temp) = self.temporal_encode(g, p, batch)?;
        let z = g.constant(batch.z.clone());
        let node_in = g.concat(&[z, h_temp], 1)?;
        let w = g.matmul(node_in, p.var("node.w_in")?)?;
        let pre = g.add(w, p.var("node.b_in")?)?;
        let h = g.relu(pre);

        let mut per_relation = Vec::new();
        let mut neighbourhood_weights = Vec::new();
        for r in 0..self.relations_used() {
            let (hr, att) = self.gat_relation(g, p, h, &batch.graph.relations[r], r)?;
            per_relation.push(hr);
            neighbourhood_weights.push(att);
        }
        let (h_spatial, relation_weights) = self.relation_aggregate(g, p, &per_relation, &batch.graph)?;

        let cat = g.concat(&[h_temp, h_spatial], 1)?;
        let f = g.matmul(cat, p.var("fusion.w")?)?;
        let f = g.add(f, p.var("fusion.b")?)?;
        let fused = g.relu(f);

        let reg = g.matmul(fused, p.var("head.reg.w")?)?;
        let reg = g.add(reg, p.var("head.reg.b")?)?;
        let reg = g.tanh(reg);
        let delta = g.reshape(reg, &[batch.n_blocks()])?;
        let logits = g.matmul(fused, p.var("head.cls.w")?)?;
        let logits = g.add(logits, p.var("head.cls.b")?)?;

        Ok(ForwardOutput { delta, logits, decay, relation_weights, neighbourhood_weights, h_temp, h_spatial })
    }

    /// Multi-head self-attention over weeks, biased along the key axis by
    /// the decay sequence, mean-pooled to one vector per block.
    fn temporal_encode(&self, g: &mut Graph, p: &BoundParams, batch: &PeriodBatch) -> Result<(Option<Var>, Var)> {
        let t = batch.weeks();
        let h = self.config.hidden_dim;
        let decay = if self.config.use_disaster_bias {
            let alpha = g.softplus(p.var("decay.theta")?);
            Some(DecayOp::new(batch.events.clone(), t).apply(g, alpha))
        } else {
            None
        };

        let x = g.constant(batch.x.clone());
        let pe = g.constant(positional_encoding(t, h));
        let w_in = p.var("temporal.w_in")?;
        let offset = g.add(pe, p.var("temporal.b_in")?)?;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.attention_heads);
        for head in 0..self.config.attention_heads {
            // (X W_in + PE + b_in) W  ==  X (W_in W) + (PE + b_in) W
            let mut project = |name: &str| -> Result<Var> {
                let w = p.var(&format!("temporal.head{head}.{name}"))?;
                let w_eff = g.matmul(w_in, w)?;
                let off = g.matmul(offset, w)?;
                let xw = g.matmul(x, w_eff)?;
                Ok(g.add(xw, off)?)
            };
            let q = project("w_q")?;
            let k = project("w_k")?;
            let v = project("w_v")?;
            heads.push(g.attention_pool(q, k, v, decay, scale)?);
        }
        let cat = g.concat(&heads, 1)?;
        let out = g.matmul(cat, p.var("temporal.w_o")?)?;
        let h_temp = g.add(out, p.var("temporal.b_o")?)?;
        Ok((decay, h_temp))
    }

    fn gat_relation(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h: Var,
        rel: &RelationTensors,
        r: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let n = g.shape(h)[0];
        let (set, input) = if self.config.share_gat {
            let shifted = g.add(h, p.var(&format!("gat.r{r}.embed"))?)?;
            ("gat.shared".to_string(), shifted)
        } else {
            (format!("gat.r{r}"), h)
        };
        let feature = g.constant(rel.edge_feature.clone());
        let mut sum = None;
        let mut weights = Vec::with_capacity(self.config.gat_heads);
        for head in 0..self.config.gat_heads {
            let prefix = format!("{set}.head{head}");
            let wh = g.matmul(input, p.var(&format!("{prefix}.w"))?)?;
            let s_self = g.matmul(wh, p.var(&format!("{prefix}.a_self"))?)?;
            let s_self = g.reshape(s_self, &[n])?;
            let s_neigh = g.matmul(wh, p.var(&format!("{prefix}.a_neigh"))?)?;
            let s_neigh = g.reshape(s_neigh, &[n])?;
            let e_self = g.gather_rows(s_self, rel.dst.clone())?;
            let e_neigh = g.gather_rows(s_neigh, rel.src.clone())?;
            let e_feat = g.mul(feature, p.var(&format!("{prefix}.u"))?)?;
            let logit = g.add(e_self, e_neigh)?;
            let logit = g.add(logit, e_feat)?;
            let logit = g.leaky_relu(logit, self.config.leaky_slope);
            let att = g.segment_softmax(logit, rel.dst.clone(), n)?;
            weights.push(att);

            let e = rel.dst.len();
            let msg = g.gather_rows(wh, rel.src.clone())?;
            let att_col = g.reshape(att, &[e, 1])?;
            let msg = g.mul(msg, att_col)?;
            let agg = g.scatter_add_rows(msg, rel.dst.clone(), n)?;
            sum = Some(match sum {
                None => agg,
                Some(s) => g.add(s, agg)?,
            });
        }
        let sum = sum.expect("at least one head");
        let out = if self.config.gat_heads == 1 { sum } else { g.scale(sum, 1.0 / self.config.gat_heads as f64) };
        Ok((out, weights))
    }

    /// Soft attention over relations, restricted per node to the relations
    /// in which it has edges. Adjacency is never masked so every node keeps
    /// at least one admissible relation.
    fn relation_aggregate(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        per_relation: &[Var],
        graph: &GraphTensors,
    ) -> Result<(Var, Option<Var>)> {
        let r_used = per_relation.len();
        if r_used == 1 {
            return Ok((per_relation[0], None));
        }
        let (n, h) = (g.shape(per_relation[0])[0], g.shape(per_relation[0])[1]);
        let w_a = p.var("relation.w_a")?;
        let w_vec = p.var("relation.w_a_vec")?;
        let mut scores = Vec::with_capacity(r_used);
        let mut stacked = Vec::with_capacity(r_used);
        for &hr in per_relation {
            let s = g.matmul(hr, w_a)?;
            let s = g.tanh(s);
            scores.push(g.matmul(s, w_vec)?);
            stacked.push(g.reshape(hr, &[n, 1, h])?);
        }
        let scores = g.concat(&scores, 1)?;
        let mut mask = vec![false; n * r_used];
        for (r, rel) in graph.relations.iter().enumerate().take(r_used).skip(1) {
            for (i, &iso) in rel.isolated.iter().enumerate() {
                mask[i * r_used + r] = iso;
            }
        }
        let scores = g.masked_fill(scores, &mask, f64::NEG_INFINITY)?;
        let alpha = g.row_softmax(scores);
        let stacked = g.concat(&stacked, 1)?;
        let alpha3 = g.reshape(alpha, &[n, r_used, 1])?;
        let weighted = g.mul(stacked, alpha3)?;
        Ok((g.sum_axis(weighted, 1)?, Some(alpha)))
    }

    /// Inference with the model's own parameters.
    pub fn predict(&self, batch: &PeriodBatch, block_ids: &[String]) -> Result<Vec<PredictionRecord>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.forward(&mut g, &bound, batch)?;
        Ok(records(&g, &out, block_ids))
    }
}

/// Reads predictions off a finished forward pass.
pub(crate) fn records(g: &Graph, out: &ForwardOutput, block_ids: &[String]) -> Vec<PredictionRecord> {
    let delta = g.value(out.delta).data();
    let logits = g.value(out.logits);
    block_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let row = logits.row(i);
            let class_logits = [row[0], row[1], row[2]];
            PredictionRecord {
                block_id: id.clone(),
                delta_y_hat: delta[i],
                class_logits,
                class: argmax_class(&class_logits),
            }
        })
        .collect()
}

/// Highest logit, first index on ties.
pub fn argmax_class(logits: &[f64]) -> ChangeClass {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    ChangeClass::from_index(best).expect("three logits")
}
