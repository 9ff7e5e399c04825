use std::rc::Rc;

use autodiff::Array;
use serde::{Deserialize, Serialize};

use crate::data::{
    period_range, series_for, weekly_aggregate_weather, ChangeClass, Dataset, LabelConfig, MissingDays, Standardizer,
};
use crate::error::{Error, Result};
use crate::graphs::MultiRelationalGraph;
use crate::model::{GraphTensors, PeriodBatch, TEMPORAL_FEATURES};
use crate::resilience::{rolling_resilience_cached, ResilienceConfig, SplineCache};

/// Settings for turning a dataset into model inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub resilience: ResilienceConfig,
    pub labels: LabelConfig,
    pub missing_days: MissingDays,
}

/// Unscaled inputs and targets for one period.
#[derive(Clone, Debug)]
pub struct PeriodFeatures {
    /// `[n, t, 6]`: visits, active POIs, resilience (NaN where undefined),
    /// precipitation, wind, pressure.
    pub x: Vec<f64>,
    /// `[n, d]`.
    pub z: Vec<f64>,
    pub events: Rc<Vec<Vec<(usize, f64)>>>,
    pub classes: Vec<ChangeClass>,
    pub delta: Vec<f64>,
}

/// Everything training reads. Samples are `(period, block)` pairs numbered
/// `period * n_blocks + block`.
#[derive(Clone, Debug)]
pub struct Features {
    pub block_ids: Vec<String>,
    pub period_labels: Vec<String>,
    pub t: usize,
    pub z_dim: usize,
    pub periods: Vec<PeriodFeatures>,
    pub graph: Rc<GraphTensors>,
}

impl Features {
    pub fn n_blocks(&self) -> usize {
        self.block_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_blocks() * self.periods.len()
    }

    /// `(period, block)` of a sample id.
    pub fn split(&self, sample: usize) -> (usize, usize) {
        (sample / self.n_blocks(), sample % self.n_blocks())
    }

    /// Class of every sample.
    pub fn labels(&self) -> Vec<ChangeClass> {
        self.periods.iter().flat_map(|p| p.classes.iter().copied()).collect()
    }

    pub fn n_relations(&self) -> usize {
        self.graph.n_relations()
    }
}

/// Builds the weekly feature tensor, attributes, decay events and labels
/// for every period.
pub fn prepare_features(dataset: &Dataset, graph: &MultiRelationalGraph, config: &FeatureConfig) -> Result<Features> {
    config.resilience.validate()?;
    if graph.n_nodes != dataset.n_blocks() {
        return Err(Error::Data(format!(
            "graph has {} nodes but the dataset has {} blocks",
            graph.n_nodes,
            dataset.n_blocks()
        )));
    }
    graph.validate()?;
    let n = dataset.n_blocks();
    let t = dataset.t;
    let mut cache = SplineCache::new();
    let mut periods = Vec::with_capacity(dataset.n_periods());
    for period in 0..dataset.n_periods() {
        let window = period_range(dataset, period)?;
        let mut x = vec![0.0; n * t * TEMPORAL_FEATURES];
        for b in 0..n {
            let series = series_for(dataset, b, window.clone());
            let visits: Vec<f64> = series.visits.iter().map(|&v| v as f64).collect();
            let resilience = rolling_resilience_cached(&visits, &config.resilience, &mut cache);
            let weather = weekly_aggregate_weather(&dataset.weather[b], window.start, t, config.missing_days)
                .map_err(|e| Error::Data(format!("block {}: {e}", dataset.block_ids[b])))?;
            for w in 0..t {
                let row = &mut x[(b * t + w) * TEMPORAL_FEATURES..(b * t + w + 1) * TEMPORAL_FEATURES];
                row[0] = visits[w];
                row[1] = series.active[w] as f64;
                row[2] = resilience[w].unwrap_or(f64::NAN);
                row[3..6].copy_from_slice(&weather[w]);
            }
        }
        let records = &dataset.records[period];
        periods.push(PeriodFeatures {
            x,
            z: records.iter().flat_map(|r| r.z.iter().copied()).collect(),
            events: Rc::new(dataset.block_events(period)),
            classes: dataset.labels(period, &config.labels),
            delta: records.iter().map(|r| r.delta_y()).collect(),
        });
    }
    Ok(Features {
        block_ids: dataset.block_ids.clone(),
        period_labels: dataset.periods.iter().map(|p| p.label.clone()).collect(),
        t,
        z_dim: dataset.z_dim(),
        periods,
        graph: Rc::new(GraphTensors::new(graph)),
    })
}

/// Standardization fitted on training samples only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    /// Over all weeks of the training samples, one column per channel.
    pub temporal: Standardizer,
    pub attributes: Standardizer,
}

impl FeatureScaler {
    pub fn fit(features: &Features, train: &[usize]) -> Self {
        let (t, d) = (features.t, features.z_dim);
        let mut weekly = Vec::with_capacity(train.len() * t);
        let mut attrs = Vec::with_capacity(train.len());
        for &s in train {
            let (p, b) = features.split(s);
            let pf = &features.periods[p];
            let block = &pf.x[b * t * TEMPORAL_FEATURES..(b + 1) * t * TEMPORAL_FEATURES];
            weekly.extend(block.chunks_exact(TEMPORAL_FEATURES));
            attrs.push(&pf.z[b * d..(b + 1) * d]);
        }
        Self { temporal: Standardizer::fit(TEMPORAL_FEATURES, weekly), attributes: Standardizer::fit(d, attrs) }
    }

    /// Scaled model input for one period. Undefined resilience becomes 0,
    /// the training mean.
    pub fn batch(&self, features: &Features, period: usize) -> Result<PeriodBatch> {
        let pf = &features.periods[period];
        let n = features.n_blocks();
        let mut x = pf.x.clone();
        for row in x.chunks_exact_mut(TEMPORAL_FEATURES) {
            self.temporal.apply_row(row);
            for v in row.iter_mut() {
                if v.is_nan() {
                    *v = 0.0;
                }
            }
        }
        let mut z = pf.z.clone();
        if features.z_dim > 0 {
            for row in z.chunks_exact_mut(features.z_dim) {
                self.attributes.apply_row(row);
            }
        }
        Ok(PeriodBatch {
            x: Array::new(&[n, features.t, TEMPORAL_FEATURES], x)?,
            z: Array::new(&[n, features.z_dim], z)?,
            events: pf.events.clone(),
            graph: features.graph.clone(),
        })
    }
}
