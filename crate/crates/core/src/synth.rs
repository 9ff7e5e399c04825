//! Deterministic synthetic scenarios with known disaster, competition and
//! diffusion dynamics.
//!
//! Each period's latent change score for block `i` is
//!
//! ```text
//! s1_i = -own_weight * vuln_i * I_i + competition_weight * G_i + noise
//! s_i  = s1_i + a * mean_{j in kNN(i)} s1_j      (a = a_plus if the mean is > 0, else a_minus)
//! ```
//!
//! where `I_i` is the decayed impact summed over the period (in severity
//! units, so an early event of severity `s` contributes close to `s`), `vuln_i`
//! depends on the block attributes, and `G_i` is the gravity-weighted
//! impact suffered by same-sector competitors (over the capped gravity
//! relations), averaged across the block's sectors. Classes are cut at quantiles
//! of `s`; visitation drops by `exp(-visit_impact * D(t))`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_label, BlockRecord, ChangeClass, Dataset, DisasterEvent, LabelConfig, PoiRecord, DAYS_PER_WEEK,
};
use crate::error::{Error, Result};
use crate::graphs::{knn_adjacency, sector_relations, SectorConfig};
use crate::resilience::decay_sequence;
use crate::training::run::{read_json, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisasterSpec {
    /// Global week of landfall.
    pub week: usize,
    /// Severity at the footprint centre.
    pub severity: f64,
    /// Footprint radius in meters. Severity is flat over the inner half and
    /// falls linearly to 0 at the edge.
    pub radius: f64,
    /// Footprint centre; drawn near a random block when absent.
    pub center: Option<(f64, f64)>,
}

impl Default for DisasterSpec {
    fn default() -> Self {
        Self { week: 40, severity: 3.0, radius: 1200.0, center: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Log-scale sd of weekly visit noise.
    pub visits: f64,
    /// Sd of the latent change score noise.
    pub label: f64,
    /// Scale of day-to-day weather variation.
    pub weather: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { visits: 0.3, label: 0.01, weather: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_blocks: usize,
    /// Side of the square study area in meters.
    pub extent: f64,
    pub n_clusters: usize,
    /// Share of blocks placed around cluster centres; the rest are uniform.
    pub cluster_fraction: f64,
    pub cluster_sd: f64,
    pub n_sectors: usize,
    pub pois_per_block_min: usize,
    pub pois_per_block_max: usize,
    pub z_dim: usize,
    pub weeks_per_period: usize,
    pub n_periods: usize,
    pub total_weeks: usize,
    pub disasters: Vec<DisasterSpec>,
    /// True decay rate.
    pub alpha: f64,
    pub a_plus: f64,
    pub a_minus: f64,
    /// Neighbours in the diffusion step.
    pub diffusion_k: usize,
    pub own_weight: f64,
    pub competition_weight: f64,
    /// Log-visit drop per unit of decayed disaster impact.
    pub visit_impact: f64,
    pub noise: NoiseConfig,
    /// Target shares of Increase, NoChange, Decrease.
    pub class_proportions: [f64; 3],
    pub seed: u64,
}

impl Default for ScenarioConfig {
    /// The reference benchmark: 300 blocks, 8 sectors, 2 periods, 3
    /// disasters, seed 42.
    fn default() -> Self {
        Self {
            n_blocks: 300,
            extent: 6000.0,
            n_clusters: 6,
            cluster_fraction: 0.7,
            cluster_sd: 600.0,
            n_sectors: 8,
            pois_per_block_min: 1,
            pois_per_block_max: 6,
            z_dim: 4,
            weeks_per_period: 104,
            n_periods: 2,
            total_weeks: 156,
            disasters: vec![
                DisasterSpec { week: 30, ..Default::default() },
                DisasterSpec { week: 78, ..Default::default() },
                DisasterSpec { week: 118, ..Default::default() },
            ],
            alpha: std::f64::consts::LN_2 / 5.0,
            a_plus: 0.5,
            a_minus: 0.3,
            diffusion_k: 6,
            own_weight: 2.0,
            competition_weight: 1.0,
            visit_impact: 0.2,
            noise: NoiseConfig::default(),
            class_proportions: [0.3, 0.4, 0.3],
            seed: 42,
        }
    }
}

/// NAICS codes handed out to synthetic sectors, in order.
const SECTOR_CODES: [u16; 20] =
    [445, 448, 452, 454, 541, 611, 621, 624, 711, 713, 721, 722, 811, 812, 423, 441, 442, 443, 444, 446];

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks < 2 || self.n_sectors == 0 || self.n_periods == 0 || self.weeks_per_period == 0 {
            return bad("n_blocks >= 2, n_sectors, n_periods and weeks_per_period must be positive".into());
        }
        if self.n_sectors > SECTOR_CODES.len() {
            return bad(format!("at most {} sectors are supported", SECTOR_CODES.len()));
        }
        if self.total_weeks < self.weeks_per_period {
            return bad("total_weeks must cover one period".into());
        }
        if self.pois_per_block_min > self.pois_per_block_max {
            return bad("pois_per_block_min exceeds pois_per_block_max".into());
        }
        let positive = [("extent", self.extent), ("alpha", self.alpha), ("cluster_sd", self.cluster_sd)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("a_plus", self.a_plus),
            ("a_minus", self.a_minus),
            ("own_weight", self.own_weight),
            ("competition_weight", self.competition_weight),
            ("visit_impact", self.visit_impact),
            ("noise.visits", self.noise.visits),
            ("noise.label", self.noise.label),
            ("noise.weather", self.noise.weather),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.cluster_fraction) {
            return bad("cluster_fraction must lie in [0, 1]".into());
        }
        let total: f64 = self.class_proportions.iter().sum();
        if self.class_proportions.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!(
                "class_proportions must be non-negative and sum to 1, got {:?}",
                self.class_proportions
            ));
        }
        for d in &self.disasters {
            if d.week >= self.total_weeks || !(d.severity >= 0.0) || !(d.radius > 0.0) {
                return bad(format!("disaster at week {} is outside the record or has invalid size", d.week));
            }
        }
        Ok(())
    }

    pub fn period_start(&self, p: usize) -> usize {
        if self.n_periods > 1 {
            p * (self.total_weeks - self.weeks_per_period) / (self.n_periods - 1)
        } else {
            0
        }
    }
}

/// Ground truth behind a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub alpha: f64,
    pub a_plus: f64,
    pub a_minus: f64,
    pub periods: Vec<PeriodTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodTruth {
    pub period_id: String,
    pub blocks: Vec<BlockTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTruth {
    pub block_id: String,
    /// Sum of event severities at this block inside the period.
    pub impact: f64,
    /// Decayed sum of the true impact sequence, in severity units.
    pub cumulative_impact: f64,
    pub competition: f64,
    pub score: f64,
    pub class: ChangeClass,
}

/// A generated dataset with its ground truth.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub dataset: Dataset,
    pub truth: Truth,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let n = config.n_blocks;
    let t = config.weeks_per_period;
    let g = config.total_weeks;

    // layout
    let mut rng = stream(config.seed, 1);
    let centres: Vec<(f64, f64)> = (0..config.n_clusters.max(1))
        .map(|_| (rng.random_range(0.15..0.85) * config.extent, rng.random_range(0.15..0.85) * config.extent))
        .collect();
    let centroids: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            if config.n_clusters > 0 && rng.random::<f64>() < config.cluster_fraction {
                let c = centres[rng.random_range(0..centres.len())];
                let x = (c.0 + config.cluster_sd * normal(&mut rng)).clamp(0.0, config.extent);
                let y = (c.1 + config.cluster_sd * normal(&mut rng)).clamp(0.0, config.extent);
                (x, y)
            } else {
                (rng.random::<f64>() * config.extent, rng.random::<f64>() * config.extent)
            }
        })
        .collect();
    let block_ids: Vec<String> = (0..n).map(|i| format!("B{:04}", i + 1)).collect();

    // attributes and vulnerability
    let mut rng = stream(config.seed, 2);
    let z: Vec<Vec<f64>> = (0..n).map(|_| (0..config.z_dim).map(|_| normal(&mut rng)).collect()).collect();
    let beta: Vec<f64> = (0..config.z_dim).map(|k| if k % 2 == 0 { 0.5 } else { -0.3 }).collect();
    let vulnerability: Vec<f64> =
        z.iter().map(|zi| 1.0 + 0.5 * zi.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().tanh()).collect();

    // POIs
    let mut rng = stream(config.seed, 3);
    let mut poi_sector = Vec::new();
    let mut poi_block = Vec::new();
    let mut poi_base = Vec::new();
    for b in 0..n {
        let count = rng.random_range(config.pois_per_block_min..=config.pois_per_block_max);
        for _ in 0..count {
            poi_block.push(b);
            poi_sector.push(rng.random_range(0..config.n_sectors));
            poi_base.push((4.0 + 0.6 * normal(&mut rng)).exp());
        }
    }
    let mut hosts: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); config.n_sectors];
    for ((&b, &s), &base) in poi_block.iter().zip(&poi_sector).zip(&poi_base) {
        *hosts[s].entry(b).or_insert(0.0) += base;
    }

    // disaster footprints
    let mut rng = stream(config.seed, 4);
    let mut severity: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(config.disasters.len());
    for spec in &config.disasters {
        let centre = spec.center.unwrap_or_else(|| {
            let c = centroids[rng.random_range(0..n)];
            (c.0 + 200.0 * normal(&mut rng), c.1 + 200.0 * normal(&mut rng))
        });
        let hits = (0..n)
            .filter_map(|i| {
                let d = distance(centroids[i], centre);
                let s = spec.severity * (2.0 * (1.0 - d / spec.radius)).min(1.0);
                (s > 0.0).then_some((i, s))
            })
            .collect();
        severity.push(hits);
    }

    // competitors: the capped gravity relations over base demand
    let demand: BTreeMap<u16, BTreeMap<usize, f64>> =
        hosts.iter().enumerate().map(|(k, m)| (SECTOR_CODES[k], m.clone())).collect();
    let relations = sector_relations(&centroids, &demand, &SectorConfig::default())?;
    let mut competitors: Vec<Vec<Vec<(usize, f64)>>> = vec![Vec::new(); n];
    for rel in &relations {
        let mut by_node: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for &(i, j, w) in &rel.edges {
            by_node.entry(i).or_default().push((j, w));
            by_node.entry(j).or_default().push((i, w));
        }
        for (i, list) in by_node {
            competitors[i].push(list);
        }
    }
    let neighbours = knn_adjacency(&centroids, config.diffusion_k.min(n - 1).max(1))?;
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(i, j, _) in &neighbours.edges {
        adjacency[i].push(j);
        adjacency[j].push(i);
    }

    // per-period dynamics and labels
    let label_config = LabelConfig::default();
    let mut rng_label = stream(config.seed, 5);
    let mut rng_y = stream(config.seed, 6);
    let mut y: Vec<f64> = (0..n).map(|_| rng_y.random_range(0.05..0.5)).collect();
    let mut records = Vec::with_capacity(config.n_periods);
    let mut truth_periods = Vec::with_capacity(config.n_periods);
    let mut decay_by_period = Vec::with_capacity(config.n_periods);
    for p in 0..config.n_periods {
        let start = config.period_start(p);
        let mut events: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (spec, hits) in config.disasters.iter().zip(&severity) {
            if spec.week >= start && spec.week < start + t {
                for (&i, &s) in hits {
                    events[i].push((spec.week - start, s));
                }
            }
        }
        let decay: Vec<Vec<f64>> = events.iter().map(|ev| decay_sequence(ev, config.alpha, t)).collect();
        let unit = 1.0 - (-config.alpha).exp();
        let cumulative: Vec<f64> = decay.iter().map(|d| unit * d.iter().sum::<f64>()).collect();
        let competition: Vec<f64> = competitors
            .iter()
            .map(|sectors| {
                let per_sector = sectors.iter().map(|list| {
                    let total: f64 = list.iter().map(|c| c.1).sum();
                    list.iter().map(|&(j, w)| w * cumulative[j]).sum::<f64>() / total
                });
                per_sector.sum::<f64>() / sectors.len().max(1) as f64
            })
            .collect();
        let first: Vec<f64> = (0..n)
            .map(|i| {
                -config.own_weight * vulnerability[i] * cumulative[i]
                    + config.competition_weight * competition[i]
                    + config.noise.label * normal(&mut rng_label)
            })
            .collect();
        let score: Vec<f64> = (0..n)
            .map(|i| {
                if adjacency[i].is_empty() {
                    return first[i];
                }
                let m = adjacency[i].iter().map(|&j| first[j]).sum::<f64>() / adjacency[i].len() as f64;
                first[i] + if m > 0.0 { config.a_plus } else { config.a_minus } * m
            })
            .collect();
        let classes = assign_classes(&score, &config.class_proportions)?;

        let spread = score.iter().map(|s| s.abs()).fold(0.0, f64::max);
        let mut period_records = Vec::with_capacity(n);
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let y_start = y[i];
            let magnitude = 0.002 + 0.05 * if spread > 0.0 { score[i].abs() / spread } else { 0.0 };
            let y_end = match classes[i] {
                ChangeClass::NoChange => y_start,
                ChangeClass::Increase => (y_start + magnitude).min(1.0),
                ChangeClass::Decrease => y_start - magnitude.min(0.9 * y_start),
            };
            debug_assert_eq!(derive_label(y_start, y_end, &label_config), classes[i]);
            y[i] = y_end;
            period_records.push(BlockRecord {
                block_id: block_ids[i].clone(),
                centroid: centroids[i],
                z: z[i].clone(),
                y_start,
                y_end,
            });
            blocks.push(BlockTruth {
                block_id: block_ids[i].clone(),
                impact: events[i].iter().map(|e| e.1).sum(),
                cumulative_impact: cumulative[i],
                competition: competition[i],
                score: score[i],
                class: classes[i],
            });
        }
        records.push(period_records);
        truth_periods.push(PeriodTruth { period_id: period_label(p), blocks });
        decay_by_period.push(decay);
    }

    // visits over the whole record: each week uses the decay of every event so far
    let mut all_events: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (spec, hits) in config.disasters.iter().zip(&severity) {
        for (&i, &s) in hits {
            all_events[i].push((spec.week, s));
        }
    }
    let global_decay: Vec<Vec<f64>> = all_events.iter().map(|ev| decay_sequence(ev, config.alpha, g)).collect();
    let mut rng = stream(config.seed, 7);
    let pois: Vec<PoiRecord> = (0..poi_block.len())
        .map(|k| {
            let b = poi_block[k];
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let visits = (0..g)
                .map(|w| {
                    let season = 1.0 + 0.15 * (std::f64::consts::TAU * w as f64 / 52.0 + phase).sin();
                    let shock = (-config.visit_impact * global_decay[b][w]).exp();
                    let noise = (config.noise.visits * normal(&mut rng)).exp();
                    (poi_base[k] * season * shock * noise).round().max(0.0) as u64
                })
                .collect();
            PoiRecord { poi_id: format!("P{:05}", k + 1), block: b, sector: SECTOR_CODES[poi_sector[k]], visits }
        })
        .collect();

    // regional weather with storms in disaster weeks
    let mut rng = stream(config.seed, 8);
    let days = g * DAYS_PER_WEEK;
    let storm: Vec<f64> = (0..days)
        .map(|d| {
            config
                .disasters
                .iter()
                .filter(|s| d >= s.week * DAYS_PER_WEEK && d < s.week * DAYS_PER_WEEK + 3)
                .map(|s| s.severity)
                .sum()
        })
        .collect();
    let regional: Vec<[f64; 3]> = (0..days)
        .map(|d| {
            let wet = rng.random::<f64>() < 0.3;
            let precip = if wet { 5.0 * config.noise.weather * rng.random::<f64>() } else { 0.0 } + 25.0 * storm[d];
            let wind = 12.0 + 3.0 * config.noise.weather * normal(&mut rng) + 15.0 * storm[d];
            let pressure = 1013.0 + 4.0 * config.noise.weather * normal(&mut rng) - 10.0 * storm[d];
            [precip, wind.max(0.0), pressure]
        })
        .collect();
    let weather = (0..n)
        .map(|_| {
            regional
                .iter()
                .map(|r| {
                    let jitter = config.noise.weather * normal(&mut rng);
                    Some([(r[0] + 0.2 * jitter).max(0.0), (r[1] + 0.5 * jitter).max(0.0), r[2] + 0.3 * jitter])
                })
                .collect()
        })
        .collect();

    let disasters = config
        .disasters
        .iter()
        .zip(severity)
        .enumerate()
        .map(|(k, (spec, hits))| DisasterEvent {
            event_id: format!("E{}", k + 1),
            week: spec.week,
            severity_by_block: hits,
        })
        .collect();
    let period_labels = (0..config.n_periods).map(period_label).collect();
    let dataset = Dataset::new(block_ids, records, pois, weather, disasters, period_labels, t, g)?;
    let truth = Truth { alpha: config.alpha, a_plus: config.a_plus, a_minus: config.a_minus, periods: truth_periods };
    Ok(Scenario { config: config.clone(), dataset, truth })
}

fn period_label(p: usize) -> String {
    format!("P{}", p + 1)
}

/// Quantile cut of `score` into Decrease (lowest), NoChange and Increase
/// (highest). Cut points sit between neighbouring sorted scores, so tied
/// scores always share a class. All-equal scores give NoChange throughout.
pub fn assign_classes(score: &[f64], proportions: &[f64; 3]) -> Result<Vec<ChangeClass>> {
    let n = score.len();
    let mut sorted = score.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n_inc = (proportions[0] * n as f64).round() as usize;
    let n_dec = (proportions[2] * n as f64).round() as usize;
    let cut = |k: usize| if k == 0 || k >= n { None } else { Some(0.5 * (sorted[k - 1] + sorted[k])) };
    let lo = if n_dec >= n { Some(f64::INFINITY) } else { cut(n_dec) };
    let hi = if n_inc >= n { Some(f64::NEG_INFINITY) } else { cut(n - n_inc) };
    let classes: Vec<ChangeClass> = score
        .iter()
        .map(|&s| {
            if n_dec > 0 && lo.is_some_and(|l| s < l) {
                ChangeClass::Decrease
            } else if n_inc > 0 && hi.is_some_and(|h| s > h) {
                ChangeClass::Increase
            } else {
                ChangeClass::NoChange
            }
        })
        .collect();
    if sorted.first() == sorted.last() {
        return Ok(vec![ChangeClass::NoChange; n]);
    }
    for c in ChangeClass::ALL {
        let share = classes.iter().filter(|&&k| k == c).count() as f64 / n as f64;
        if (share - proportions[c.index()]).abs() > 0.03 {
            return Err(Error::Config(format!(
                "class proportions {proportions:?} are infeasible: {c} gets {share:.3} because many blocks share \
                 the same change score; add label noise or more disaster exposure"
            )));
        }
    }
    Ok(classes)
}

impl Scenario {
    /// Writes the four CSV tables, `scenario.json` and `truth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("scenario.json"), &self.config)?;
        write_json(&dir.join("truth.json"), &self.truth)?;
        let ds = &self.dataset;
        let d = ds.z_dim();

        let mut s = String::from("block_id,cx,cy");
        for k in 0..d {
            s.push_str(&format!(",z_{k}"));
        }
        s.push_str(",period_id,y_start,y_end\n");
        for (p, period) in ds.records.iter().enumerate() {
            for r in period {
                s.push_str(&format!("{},{},{}", r.block_id, r.centroid.0, r.centroid.1));
                for v in &r.z {
                    s.push_str(&format!(",{v}"));
                }
                s.push_str(&format!(",{},{},{}\n", ds.periods[p].label, r.y_start, r.y_end));
            }
        }
        write(dir, "blocks.csv", &s)?;

        let mut s = String::from("poi_id,block_id,naics3");
        for w in 0..ds.total_weeks {
            s.push_str(&format!(",w{w}"));
        }
        s.push('\n');
        for poi in &ds.pois {
            s.push_str(&format!("{},{},{}", poi.poi_id, ds.block_ids[poi.block], poi.sector));
            for v in &poi.visits {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        write(dir, "pois.csv", &s)?;

        let mut s = String::from("block_id,day_index,precip,wind,pressure\n");
        for (b, days) in ds.weather.iter().enumerate() {
            for (day, w) in days.iter().enumerate() {
                if let Some([a, b2, c]) = w {
                    s.push_str(&format!("{},{day},{a},{b2},{c}\n", ds.block_ids[b]));
                }
            }
        }
        write(dir, "weather.csv", &s)?;

        let mut s = String::from("event_id,week,block_id,severity\n");
        for e in &ds.disasters {
            for (&b, &sev) in &e.severity_by_block {
                s.push_str(&format!("{},{},{},{sev}\n", e.event_id, e.week, ds.block_ids[b]));
            }
        }
        write(dir, "disasters.csv", &s)
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a scenario configuration; missing fields take reference values.
pub fn read_scenario_config(path: &Path) -> Result<ScenarioConfig> {
    read_json(path)
}
