use autodiff::{Adam, Array, Graph, ParamSet};
use serde::{Deserialize, Serialize};

use super::features::{FeatureScaler, Features};
use super::folds::{kfold_split, Fold, FoldPlan};
use super::metrics::{macro_f1, ClassScores};
use crate::data::{multiplicities, resample_balanced, ChangeClass};
use crate::error::{Error, Result};
use crate::model::{argmax_class, LossTargets, Model, ModelConfig, ModelDims, PeriodBatch};

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_diff: f64,
    pub train_f1: f64,
    pub val_f1: f64,
}

/// Model output for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePrediction {
    pub sample: usize,
    pub delta_y_hat: f64,
    pub class: ChangeClass,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    /// Parameters at the epoch with the best validation F1.
    pub model: Model,
    pub scaler: FeatureScaler,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Lowest training loss over all epochs.
    pub best_loss: f64,
    pub train_f1: f64,
    pub validation: ClassScores,
    pub predictions: Vec<SamplePrediction>,
}

/// Seed for everything random inside fold `fold`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(1_000_003u64.wrapping_mul(fold as u64 + 1))
}

struct EpochOutput {
    delta: Vec<Vec<f64>>,
    classes: Vec<Vec<ChangeClass>>,
}

/// Full-batch training on one fold with Adam, keeping the parameters of the
/// epoch with the highest validation macro F1 (the first such epoch).
pub fn train_fold(features: &Features, config: &ModelConfig, fold: &Fold, fold_index: usize) -> Result<FoldResult> {
    let labels = features.labels();
    let seed = fold_seed(config.seed, fold_index);
    let resampled = resample_balanced(&fold.train, &labels, seed)?;
    let weights = multiplicities(&resampled, features.n_samples());
    let scaler = FeatureScaler::fit(features, &fold.train);
    let batches: Vec<PeriodBatch> =
        (0..features.periods.len()).map(|p| scaler.batch(features, p)).collect::<Result<_>>()?;

    let dims = ModelDims { z_dim: features.z_dim, n_relations: features.n_relations() };
    let mut model = Model::new(config.clone(), dims)?;
    let mut adam = Adam::new(config.lr);
    let train_truth: Vec<ChangeClass> = fold.train.iter().map(|&s| labels[s]).collect();
    let val_truth: Vec<ChangeClass> = fold.validation.iter().map(|&s| labels[s]).collect();
    let pick = |out: &EpochOutput, samples: &[usize]| -> Vec<ChangeClass> {
        samples
            .iter()
            .map(|&s| {
                let (p, b) = features.split(s);
                out.classes[p][b]
            })
            .collect()
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamSet, EpochOutput)> = None;
    let mut best_loss = f64::INFINITY;
    for epoch in 0..config.epochs {
        let (record, grads, out) = epoch_step(&model, features, &batches, &weights, epoch)?;
        let train_f1 = macro_f1(&train_truth, &pick(&out, &fold.train));
        let val_f1 = macro_f1(&val_truth, &pick(&out, &fold.validation));
        history.push(EpochRecord { train_f1, val_f1, ..record });
        best_loss = best_loss.min(record.loss_total);
        if best.as_ref().is_none_or(|b| val_f1 > b.0) {
            best = Some((val_f1, epoch, model.params.clone(), out));
        }
        adam.step(&mut model.params, &grads)?;
        log::debug!("fold {fold_index} epoch {epoch}: loss {:.5} val F1 {val_f1:.4}", record.loss_total);
    }
    let (_, best_epoch, params, out) = best.expect("epochs >= 1");
    model.params = params;
    let train_f1 = macro_f1(&train_truth, &pick(&out, &fold.train));
    let validation = ClassScores::compute(&val_truth, &pick(&out, &fold.validation));
    let predictions = fold
        .validation
        .iter()
        .map(|&s| {
            let (p, b) = features.split(s);
            SamplePrediction { sample: s, delta_y_hat: out.delta[p][b], class: out.classes[p][b] }
        })
        .collect();
    Ok(FoldResult {
        fold: fold_index,
        model,
        scaler,
        history,
        best_epoch,
        best_loss,
        train_f1,
        validation,
        predictions,
    })
}

/// One forward/backward pass over all periods. Each period's loss is
/// weighted by its share of the total sample weight.
fn epoch_step(
    model: &Model,
    features: &Features,
    batches: &[PeriodBatch],
    weights: &[f64],
    epoch: usize,
) -> Result<(EpochRecord, Vec<Array>, EpochOutput)> {
    let n = features.n_blocks();
    let total_weight: f64 = weights.iter().sum();
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let mut loss = None;
    let (mut cls, mut reg, mut diff) = (0.0, 0.0, 0.0);
    let mut out = EpochOutput { delta: Vec::new(), classes: Vec::new() };
    for (p, batch) in batches.iter().enumerate() {
        let f = model.forward(&mut g, &bound, batch)?;
        out.delta.push(g.value(f.delta).data().to_vec());
        let logits = g.value(f.logits);
        out.classes.push((0..n).map(|i| argmax_class(logits.row(i))).collect());

        let w = &weights[p * n..(p + 1) * n];
        let share = w.iter().sum::<f64>() / total_weight;
        if share == 0.0 {
            continue;
        }
        let pf = &features.periods[p];
        let classes: Vec<usize> = pf.classes.iter().map(|c| c.index()).collect();
        let targets = LossTargets { classes: &classes, delta_true: &pf.delta, weights: w };
        let parts = model.total_loss(&mut g, &bound, &f, targets, batch.graph.laplacian().clone())?;
        cls += share * g.value(parts.cls).item();
        reg += share * g.value(parts.reg).item();
        diff += share * parts.diff.map_or(0.0, |d| g.value(d).item());
        let scaled = g.scale(parts.total, share);
        loss = Some(match loss {
            None => scaled,
            Some(l) => g.add(l, scaled)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Data("no training samples".into()))?;
    let total = g.value(loss).item();
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at epoch {epoch}: total {total}, classification {cls}, regression {reg}, diffusion {diff}"
        )));
    }
    let grads = g.backward(loss)?;
    let grads = model.params.iter().zip(bound.vars()).map(|((_, a), &v)| grads.get_or_zeros(v, a.shape())).collect();
    let record = EpochRecord {
        epoch,
        loss_total: total,
        loss_cls: cls,
        loss_reg: reg,
        loss_diff: diff,
        train_f1: 0.0,
        val_f1: 0.0,
    };
    Ok((record, grads, out))
}

/// Summary over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    /// Validation confusion matrix summed over folds.
    pub confusion: [[u64; 3]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
    pub best_loss: f64,
    pub train_f1: f64,
    /// Fold index, or `None` for the average.
    pub fold: Option<usize>,
    pub best_epoch: Option<usize>,
    pub confusion: Option<[[u64; 3]; 3]>,
}

impl MetricsReport {
    pub fn from_folds(folds: &[FoldResult]) -> Self {
        let per: Vec<FoldMetrics> = folds
            .iter()
            .map(|f| FoldMetrics {
                macro_f1: f.validation.macro_f1,
                macro_precision: f.validation.macro_precision,
                macro_recall: f.validation.macro_recall,
                accuracy: f.validation.accuracy,
                best_loss: f.best_loss,
                train_f1: f.train_f1,
                fold: Some(f.fold),
                best_epoch: Some(f.best_epoch),
                confusion: Some(f.validation.confusion),
            })
            .collect();
        let k = per.len().max(1) as f64;
        let avg = |get: fn(&FoldMetrics) -> f64| per.iter().map(get).sum::<f64>() / k;
        let mean = FoldMetrics {
            macro_f1: avg(|m| m.macro_f1),
            macro_precision: avg(|m| m.macro_precision),
            macro_recall: avg(|m| m.macro_recall),
            accuracy: avg(|m| m.accuracy),
            best_loss: avg(|m| m.best_loss),
            train_f1: avg(|m| m.train_f1),
            fold: None,
            best_epoch: None,
            confusion: None,
        };
        let mut confusion = [[0u64; 3]; 3];
        for f in folds {
            for (row, add) in confusion.iter_mut().zip(&f.validation.confusion) {
                for (c, a) in row.iter_mut().zip(add) {
                    *c += a;
                }
            }
        }
        Self { folds: per, mean, confusion }
    }
}

/// Result of k-fold cross-validation.
#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub config: ModelConfig,
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub report: MetricsReport,
}

/// Trains one model per fold of a stratified `k`-fold split.
pub fn cross_validate(features: &Features, config: &ModelConfig, k: usize) -> Result<CrossValidation> {
    let plan = kfold_split(k, &features.labels(), config.seed)?;
    cross_validate_with(features, config, plan)
}

pub fn cross_validate_with(features: &Features, config: &ModelConfig, plan: FoldPlan) -> Result<CrossValidation> {
    config.validate()?;
    let folds = plan
        .folds
        .iter()
        .enumerate()
        .map(|(i, fold)| train_fold(features, config, fold, i))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::from_folds(&folds);
    Ok(CrossValidation { config: config.clone(), plan, folds, report })
}

/// Scores a trained model on `samples`.
pub fn evaluate(model: &Model, scaler: &FeatureScaler, features: &Features, samples: &[usize]) -> Result<ClassScores> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let labels = features.labels();
    let mut predicted = vec![None; features.n_samples()];
    for p in 0..features.periods.len() {
        if !samples.iter().any(|&s| features.split(s).0 == p) {
            continue;
        }
        let batch = scaler.batch(features, p)?;
        let ids = &features.block_ids;
        for (b, rec) in model.predict(&batch, ids)?.into_iter().enumerate() {
            predicted[p * features.n_blocks() + b] = Some(rec.class);
        }
    }
    let truth: Vec<ChangeClass> = samples.iter().map(|&s| labels[s]).collect();
    let pred: Vec<ChangeClass> = samples.iter().map(|&s| predicted[s].expect("period evaluated")).collect();
    Ok(ClassScores::compute(&truth, &pred))
}
