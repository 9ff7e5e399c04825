//! On-disk layout of a training run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::features::{FeatureConfig, FeatureScaler, Features};
use super::fit::{CrossValidation, MetricsReport};
use super::folds::FoldPlan;
use crate::error::{Error, Result};
use crate::graphs::SectorConfig;
use crate::model::{read_params, write_params, Model, ModelConfig, ModelDims, ParamEntry};

pub const CONFIG_FILE: &str = "config.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Graph construction settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub k: usize,
    pub sector: SectorConfig,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 10, sector: SectorConfig::default() }
    }
}

/// Everything that determines a run, echoed to `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub graph: GraphConfig,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            features: FeatureConfig::default(),
            graph: GraphConfig::default(),
            folds: 5,
        }
    }
}

/// Per-fold entry of the parameter manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub fold: usize,
    pub best_epoch: usize,
    pub alpha: f64,
    pub scaler: FeatureScaler,
    pub params: Vec<ParamEntry>,
}

/// Shapes and offsets of everything in `params.bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub seed: u64,
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub weeks: usize,
    pub block_ids: Vec<String>,
    pub period_labels: Vec<String>,
    pub folds: Vec<FoldManifest>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

/// Writes config, folds, history, parameters, metrics and validation
/// predictions of a cross-validated run into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, cv: &CrossValidation, features: &Features) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    write_json(&dir.join(FOLDS_FILE), &cv.plan)?;
    write_json(&dir.join(METRICS_FILE), &cv.report)?;

    let mut history = String::from("fold,epoch,loss_total,loss_cls,loss_reg,loss_diff,train_f1,val_f1\n");
    for f in &cv.folds {
        for h in &f.history {
            history.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                f.fold, h.epoch, h.loss_total, h.loss_cls, h.loss_reg, h.loss_diff, h.train_f1, h.val_f1
            ));
        }
    }
    write_file(&dir.join(HISTORY_FILE), history.as_bytes())?;

    let mut bytes = Vec::new();
    let mut folds = Vec::with_capacity(cv.folds.len());
    for f in &cv.folds {
        let params = write_params(&f.model.params, &mut bytes);
        folds.push(FoldManifest {
            fold: f.fold,
            best_epoch: f.best_epoch,
            alpha: f.model.alpha(),
            scaler: f.scaler.clone(),
            params,
        });
    }
    write_file(&dir.join(PARAMS_FILE), &bytes)?;
    let dims = cv.folds.first().map(|f| f.model.dims).unwrap_or(ModelDims { z_dim: features.z_dim, n_relations: 0 });
    let manifest = ParamsManifest {
        seed: cv.config.seed,
        config: cv.config.clone(),
        dims,
        weeks: features.t,
        block_ids: features.block_ids.clone(),
        period_labels: features.period_labels.clone(),
        folds,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;

    let labels = features.labels();
    let mut rows: Vec<_> = cv.folds.iter().flat_map(|f| f.predictions.iter().copied()).collect();
    rows.sort_by_key(|r| r.sample);
    let mut text = String::from("block_id,period_id,delta_y_hat,class_true,class_pred\n");
    for r in rows {
        let (p, b) = features.split(r.sample);
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            features.block_ids[b], features.period_labels[p], r.delta_y_hat, labels[r.sample], r.class
        ));
    }
    write_file(&dir.join(PREDICTIONS_FILE), text.as_bytes())
}

/// A run read back from disk.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub plan: FoldPlan,
    pub manifest: ParamsManifest,
    pub metrics: MetricsReport,
    /// One model per fold, in fold order.
    pub models: Vec<Model>,
}

impl TrainedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
        let plan: FoldPlan = read_json(&dir.join(FOLDS_FILE))?;
        let manifest: ParamsManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let metrics: MetricsReport = read_json(&dir.join(METRICS_FILE))?;
        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let models = manifest
            .folds
            .iter()
            .map(|f| {
                Ok(Model {
                    config: manifest.config.clone(),
                    dims: manifest.dims,
                    params: read_params(&bytes, &f.params)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if plan.folds.len() != models.len() {
            return Err(Error::Data(format!(
                "{}: {} folds planned but {} parameter sets stored",
                dir.display(),
                plan.folds.len(),
                models.len()
            )));
        }
        Ok(Self { dir: dir.to_path_buf(), config, plan, manifest, metrics, models })
    }

    /// Fold whose validation set holds `sample`.
    pub fn fold_of(&self, sample: usize) -> Option<usize> {
        self.plan.folds.iter().position(|f| f.validation.binary_search(&sample).is_ok())
    }
}
