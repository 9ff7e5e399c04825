//! Multi-relational block graph: inverse-distance k-nearest-neighbour
//! adjacency, per-sector gravity competition relations and the adjacency
//! Laplacian.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use autodiff::CsrMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{period_range, Dataset};
use crate::error::{Error, Result};

/// Distances are clamped to at least this many meters.
pub const MIN_DISTANCE: f64 = 1.0;
pub const ADJACENCY: &str = "adjacency";

/// An undirected weighted edge set; edges are stored once with `i < j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub edges: Vec<(usize, usize, f64)>,
}

impl Relation {
    /// Normalizes `(i, j, w)` triples to `i < j`, sorted, rejecting self
    /// loops, duplicates and non-positive weights.
    pub fn new(name: impl Into<String>, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let name = name.into();
        let mut out: Vec<(usize, usize, f64)> = edges.into_iter().map(|(i, j, w)| (i.min(j), i.max(j), w)).collect();
        out.sort_by_key(|a| (a.0, a.1));
        for w in out.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(Error::Data(format!("relation {name:?}: duplicate edge ({}, {})", w[0].0, w[0].1)));
            }
        }
        for &(i, j, w) in &out {
            if i == j {
                return Err(Error::Data(format!("relation {name:?}: self loop at {i}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Data(format!("relation {name:?}: edge ({i}, {j}) has weight {w}")));
            }
        }
        Ok(Self { name, edges: out })
    }

    /// Nodes touching at least one edge.
    pub fn has_edges(&self, n: usize) -> Vec<bool> {
        let mut out = vec![false; n];
        for &(i, j, _) in &self.edges {
            out[i] = true;
            out[j] = true;
        }
        out
    }

    /// NAICS code of a `sector_<code>` relation.
    pub fn sector(&self) -> Option<u16> {
        self.name.strip_prefix("sector_").and_then(|s| s.parse().ok())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRelationalGraph {
    pub n_nodes: usize,
    /// Adjacency first, then sectors by ascending code.
    pub relations: Vec<Relation>,
}

impl MultiRelationalGraph {
    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn adjacency(&self) -> &Relation {
        &self.relations[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.relations.first().map(|r| r.name.as_str()) != Some(ADJACENCY) {
            return Err(Error::Data(format!("relation 0 must be {ADJACENCY:?}")));
        }
        let mut names = HashSet::new();
        for r in &self.relations {
            if !names.insert(r.name.as_str()) {
                return Err(Error::Data(format!("duplicate relation name {:?}", r.name)));
            }
            // re-run edge validation on deserialized input
            let checked = Relation::new(r.name.clone(), r.edges.iter().copied())?;
            if checked.edges != r.edges {
                return Err(Error::Data(format!("relation {:?}: edges must be sorted with i < j", r.name)));
            }
            if let Some(&(i, j, _)) = r.edges.iter().find(|e| e.1 >= self.n_nodes) {
                return Err(Error::Data(format!(
                    "relation {:?}: edge ({i}, {j}) outside {} nodes",
                    r.name, self.n_nodes
                )));
            }
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let graph: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
        graph.validate()?;
        Ok(graph)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("graph serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Each node's `k` nearest neighbours (ties broken by index), symmetrized,
/// with weight `1 / max(d, MIN_DISTANCE)`.
pub fn knn_adjacency(centroids: &[(f64, f64)], k: usize) -> Result<Relation> {
    let n = centroids.len();
    if n < 2 {
        return Err(Error::Data(format!("k-nearest-neighbour graph needs at least 2 blocks, got {n}")));
    }
    if let Some(i) = centroids.iter().position(|c| !(c.0.is_finite() && c.1.is_finite())) {
        return Err(Error::Data(format!("block {i} has a non-finite centroid")));
    }
    let k = k.min(n - 1);
    let mut pairs = BTreeSet::new();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i).map(|j| (distance(centroids[i], centroids[j]), j)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &order[..k] {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let edges = pairs.into_iter().map(|(i, j)| (i, j, 1.0 / distance(centroids[i], centroids[j]).max(MIN_DISTANCE)));
    Relation::new(ADJACENCY, edges)
}

/// Blocks hosting each sector with their summed visits over `period`.
pub fn sector_block_visits(dataset: &Dataset, period: usize) -> Result<BTreeMap<u16, BTreeMap<usize, f64>>> {
    Ok(sector_visits_in(dataset, period_range(dataset, period)?))
}

/// Weeks covered by at least one period.
fn record_range(dataset: &Dataset) -> std::ops::Range<usize> {
    let start = dataset.periods.iter().map(|p| p.start_week).min().unwrap_or(0);
    let end = dataset.periods.iter().map(|p| p.start_week + dataset.t).max().unwrap_or(0);
    start..end
}

fn sector_visits_in(dataset: &Dataset, window: std::ops::Range<usize>) -> BTreeMap<u16, BTreeMap<usize, f64>> {
    let mut out: BTreeMap<u16, BTreeMap<usize, f64>> = BTreeMap::new();
    for poi in &dataset.pois {
        let total: u64 = poi.visits[window.clone()].iter().sum();
        *out.entry(poi.sector).or_default().entry(poi.block).or_insert(0.0) += total as f64;
    }
    out
}

/// Gravity weight `V_i V_j / max(d, MIN_DISTANCE)^2`.
pub fn gravity_weight(v_i: f64, v_j: f64, d: f64) -> f64 {
    v_i * v_j / d.max(MIN_DISTANCE).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SectorConfig {
    /// A sector qualifies with strictly more hosting blocks than this.
    pub min_blocks: usize,
    /// Keep each node's strongest edges per sector; `None` keeps the clique.
    pub edge_cap: Option<usize>,
}

impl Default for SectorConfig {
    fn default() -> Self {
        Self { min_blocks: 20, edge_cap: Some(15) }
    }
}

/// One competition relation per qualifying sector, ascending by code.
/// `sectors` maps a code to its hosting blocks and their visit totals.
pub fn sector_relations(
    centroids: &[(f64, f64)],
    sectors: &BTreeMap<u16, BTreeMap<usize, f64>>,
    config: &SectorConfig,
) -> Result<Vec<Relation>> {
    let mut out = Vec::new();
    for (&code, hosts) in sectors {
        if hosts.len() <= config.min_blocks {
            log::debug!("sector {code}: {} blocks, skipped", hosts.len());
            continue;
        }
        let members: Vec<(usize, f64)> = hosts.iter().map(|(&b, &v)| (b, v)).collect();
        if let Some(&(b, _)) = members.iter().find(|m| m.0 >= centroids.len()) {
            return Err(Error::Data(format!("sector {code}: block {b} has no centroid")));
        }
        let mut candidates = Vec::new();
        for (a, &(i, vi)) in members.iter().enumerate() {
            for &(j, vj) in &members[a + 1..] {
                let w = gravity_weight(vi, vj, distance(centroids[i], centroids[j]));
                if w > 0.0 {
                    candidates.push((i, j, w));
                }
            }
        }
        let edges = match config.edge_cap {
            Some(cap) => cap_edges(&candidates, cap),
            None => candidates,
        };
        out.push(Relation::new(format!("sector_{code}"), edges)?);
    }
    Ok(out)
}

/// Union over nodes of each node's `cap` heaviest incident edges.
fn cap_edges(edges: &[(usize, usize, f64)], cap: usize) -> Vec<(usize, usize, f64)> {
    let mut incident: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (e, &(i, j, _)) in edges.iter().enumerate() {
        incident.entry(i).or_default().push(e);
        incident.entry(j).or_default().push(e);
    }
    let mut keep = vec![false; edges.len()];
    for list in incident.values_mut() {
        list.sort_by(|&a, &b| edges[b].2.total_cmp(&edges[a].2).then(a.cmp(&b)));
        for &e in list.iter().take(cap) {
            keep[e] = true;
        }
    }
    edges.iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| *e).collect()
}

/// Adjacency first, then sector relations sorted by code.
pub fn build_multigraph(n_nodes: usize, adjacency: Relation, sectors: Vec<Relation>) -> Result<MultiRelationalGraph> {
    let mut sectors = sectors;
    sectors.sort_by_key(|r| (r.sector().unwrap_or(u16::MAX), r.name.clone()));
    let mut relations = vec![Relation { name: ADJACENCY.into(), edges: adjacency.edges }];
    relations.extend(sectors);
    let graph = MultiRelationalGraph { n_nodes, relations };
    graph.validate()?;
    Ok(graph)
}

/// Full graph for one period of a dataset.
pub fn graph_for_period(
    dataset: &Dataset,
    period: usize,
    k: usize,
    config: &SectorConfig,
) -> Result<MultiRelationalGraph> {
    let centroids = dataset.centroids();
    let adjacency = knn_adjacency(&centroids, k)?;
    let sectors = sector_relations(&centroids, &sector_block_visits(dataset, period)?, config)?;
    build_multigraph(dataset.n_blocks(), adjacency, sectors)
}

/// One graph shared by every period, with sector visit totals taken over
/// all weeks any period covers. Relation indices then mean the same sector
/// in every period.
pub fn graph_for_dataset(dataset: &Dataset, k: usize, config: &SectorConfig) -> Result<MultiRelationalGraph> {
    let centroids = dataset.centroids();
    let adjacency = knn_adjacency(&centroids, k)?;
    let sectors = sector_relations(&centroids, &sector_visits_in(dataset, record_range(dataset)), config)?;
    build_multigraph(dataset.n_blocks(), adjacency, sectors)
}

/// `L = D - W` of a relation as a sparse matrix.
/// Panics if an edge endpoint is not below `n`.
pub fn laplacian(relation: &Relation, n: usize) -> CsrMatrix {
    let mut degree = vec![0.0; n];
    let mut triplets = Vec::with_capacity(2 * relation.edges.len() + n);
    for &(i, j, w) in &relation.edges {
        triplets.push((i, j, -w));
        triplets.push((j, i, -w));
        degree[i] += w;
        degree[j] += w;
    }
    triplets.extend(degree.iter().enumerate().filter(|(_, &d)| d != 0.0).map(|(i, &d)| (i, i, d)));
    CsrMatrix::from_triplets(n, n, &triplets).expect("edge endpoints are below n")
}
