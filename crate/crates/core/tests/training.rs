use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sta4clc::data::ChangeClass;
use sta4clc::graphs::{graph_for_dataset, SectorConfig};
use sta4clc::model::ModelConfig;
use sta4clc::synth::{generate, DisasterSpec, ScenarioConfig};
use sta4clc::training::*;

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        n_blocks: 40,
        extent: 3000.0,
        n_clusters: 2,
        cluster_sd: 400.0,
        n_sectors: 3,
        weeks_per_period: 30,
        total_weeks: 40,
        disasters: vec![
            DisasterSpec { week: 8, radius: 900.0, ..Default::default() },
            DisasterSpec { week: 33, radius: 900.0, ..Default::default() },
        ],
        ..Default::default()
    }
}

fn small_features() -> Features {
    let scenario = generate(&small_scenario()).unwrap();
    let graph = graph_for_dataset(&scenario.dataset, 5, &SectorConfig::default()).unwrap();
    prepare_features(&scenario.dataset, &graph, &FeatureConfig::default()).unwrap()
}

fn quick(epochs: usize) -> ModelConfig {
    ModelConfig { hidden_dim: 8, attention_heads: 2, gat_heads: 1, epochs, lr: 0.01, ..Default::default() }
}

fn bits(model: &sta4clc::model::Model) -> Vec<u64> {
    model.params.iter().flat_map(|(_, a)| a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

fn random_classes(rng: &mut ChaCha8Rng, n: usize) -> Vec<ChangeClass> {
    (0..n).map(|_| ChangeClass::ALL[rng.random_range(0..3)]).collect()
}

#[test]
fn folds_partition_samples_and_keep_strata() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels = random_classes(&mut rng, 97);
    let plan = kfold_split(5, &labels, 42).unwrap();
    assert_eq!(plan.folds.len(), 5);
    let mut seen = vec![0; labels.len()];
    for fold in &plan.folds {
        for &s in &fold.validation {
            seen[s] += 1;
        }
        let mut all: Vec<usize> = fold.train.iter().chain(&fold.validation).copied().collect();
        all.sort();
        assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }
    assert!(seen.iter().all(|&c| c == 1));
    for c in ChangeClass::ALL {
        let counts: Vec<usize> =
            plan.folds.iter().map(|f| f.validation.iter().filter(|&&s| labels[s] == c).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{c}: {counts:?}");
    }
    assert_eq!(plan, kfold_split(5, &labels, 42).unwrap());
    assert_ne!(plan, kfold_split(5, &labels, 43).unwrap());
    assert!(kfold_split(1, &labels, 42).is_err());
    assert!(kfold_split(5, &labels[..3], 42).is_err());
}

#[test]
fn macro_f1_matches_direct_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let truth = random_classes(&mut rng, n);
        let pred = random_classes(&mut rng, n);
        let mut expected = 0.0;
        for c in ChangeClass::ALL {
            let tp = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(&pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fn_ = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            expected += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        }
        expected /= 3.0;
        assert!((macro_f1(&truth, &pred) - expected).abs() < 1e-12);
    }
}

#[test]
fn metric_examples() {
    use ChangeClass::*;
    let truth = [Increase, Increase, NoChange, NoChange, Decrease, Decrease];
    let pred = [Increase, Increase, Decrease, Decrease, Decrease, Decrease];
    let s = ClassScores::compute(&truth, &pred);
    assert_eq!(s.confusion, [[2, 0, 0], [0, 0, 2], [0, 0, 2]]);
    assert!((s.macro_f1 - (1.0 + 0.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);

    let perfect = ClassScores::compute(&truth, &truth);
    assert_eq!(
        (perfect.macro_f1, perfect.macro_precision, perfect.macro_recall, perfect.accuracy),
        (1.0, 1.0, 1.0, 1.0)
    );
    let constant = ClassScores::compute(&truth, &[NoChange; 6]);
    assert!((constant.accuracy - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let features = small_features();
    let plan = kfold_split(3, &features.labels(), 42).unwrap();
    let config = ModelConfig { lr: 0.0, ..quick(4) };
    let result = train_fold(&features, &config, &plan.folds[0], 0).unwrap();
    let fresh = sta4clc::model::Model::new(config.clone(), result.model.dims).unwrap();
    assert_eq!(bits(&result.model), bits(&fresh));
    let first = result.history[0].loss_total;
    assert!(result.history.iter().all(|h| h.loss_total == first));
}

#[test]
fn best_epoch_has_the_highest_validation_f1() {
    let features = small_features();
    let plan = kfold_split(3, &features.labels(), 42).unwrap();
    let result = train_fold(&features, &quick(12), &plan.folds[1], 1).unwrap();
    assert_eq!(result.history.len(), 12);
    let best = result.history.iter().map(|h| h.val_f1).fold(f64::NEG_INFINITY, f64::max);
    let first = result.history.iter().position(|h| h.val_f1 == best).unwrap();
    assert_eq!(result.best_epoch, first);
    assert_eq!(result.validation.macro_f1, best);
    let min_loss = result.history.iter().map(|h| h.loss_total).fold(f64::INFINITY, f64::min);
    assert_eq!(result.best_loss, min_loss);
    assert_eq!(result.predictions.len(), plan.folds[1].validation.len());

    // the stored parameters reproduce the stored validation score
    let scores = evaluate(&result.model, &result.scaler, &features, &plan.folds[1].validation).unwrap();
    assert_eq!(scores.macro_f1, best);
}

#[test]
fn training_is_deterministic() {
    let features = small_features();
    let plan = kfold_split(3, &features.labels(), 42).unwrap();
    let a = train_fold(&features, &quick(5), &plan.folds[0], 0).unwrap();
    let b = train_fold(&features, &quick(5), &plan.folds[0], 0).unwrap();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.history, b.history);
}

#[test]
fn evaluation_ignores_sample_order() {
    let features = small_features();
    let plan = kfold_split(3, &features.labels(), 42).unwrap();
    let fold = &plan.folds[2];
    let result = train_fold(&features, &quick(3), fold, 2).unwrap();
    let forward = evaluate(&result.model, &result.scaler, &features, &fold.validation).unwrap();
    let mut reversed = fold.validation.clone();
    reversed.reverse();
    let backward = evaluate(&result.model, &result.scaler, &features, &reversed).unwrap();
    assert_eq!(forward, backward);
    assert!(evaluate(&result.model, &result.scaler, &features, &[]).is_err());
}

#[test]
fn identical_ablation_rows_agree() {
    let features = small_features();
    let flags = ABLATION_GRID[7].1;
    let rows = ablate_grid(&features, &quick(3), 3, &[("a", flags), ("b", flags)]).unwrap();
    assert_eq!(rows[0].val_f1, rows[1].val_f1);
    assert_eq!(rows[0].train_loss, rows[1].train_loss);
    assert_eq!(rows[0].train_f1, rows[1].train_f1);
    assert_eq!(rows[0].improvement, 1.0);
    assert_eq!(rows[1].improvement, 1.0);
}

#[test]
fn ablation_table_layout() {
    let rows: Vec<AblationRow> = ABLATION_GRID
        .iter()
        .enumerate()
        .map(|(i, (name, flags))| AblationRow {
            model: name.to_string(),
            train_loss: 0.5,
            train_f1: 0.7,
            val_f1: 0.6 + 0.01 * i as f64,
            improvement: (0.6 + 0.01 * i as f64) / 0.6,
            flags: *flags,
        })
        .collect();
    let mut out = Vec::new();
    write_ablation_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "model,train_loss,train_f1,val_f1,improvement,disaster_impact,diffusion_constraint,multi_relation"
    );
    let flags: Vec<String> = lines[1..].iter().map(|l| l.split(',').skip(5).collect::<Vec<_>>().join(" ")).collect();
    let expected =
        ["No No No", "No Yes No", "No No Yes", "Yes No No", "No Yes Yes", "Yes Yes No", "Yes No Yes", "Yes Yes Yes"];
    assert_eq!(flags, expected);
    assert!(lines[1].starts_with("M1,0.5,0.7,0.6,1,"));
}

#[test]
fn run_directory_round_trip() {
    let features = small_features();
    let config = run::RunConfig { model: quick(3), folds: 3, ..Default::default() };
    let cv = cross_validate(&features, &config.model, config.folds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run::write_run(dir.path(), &config, &cv, &features).unwrap();
    let loaded = run::TrainedRun::load(dir.path()).unwrap();
    assert_eq!(loaded.config, config);
    assert_eq!(loaded.plan, cv.plan);
    assert_eq!(loaded.metrics, cv.report);
    for (a, b) in loaded.models.iter().zip(&cv.folds) {
        assert_eq!(bits(a), bits(&b.model));
    }
    for (k, fold) in cv.plan.folds.iter().enumerate() {
        assert!(fold.validation.iter().all(|&s| loaded.fold_of(s) == Some(k)));
    }
    let predictions = std::fs::read_to_string(dir.path().join(run::PREDICTIONS_FILE)).unwrap();
    assert_eq!(predictions.lines().count(), features.n_samples() + 1);
    let history = std::fs::read_to_string(dir.path().join(run::HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 3 * 3 + 1);
}

#[test]
fn cross_validation_report_averages_folds() {
    let features = small_features();
    let cv = cross_validate(&features, &quick(2), 3).unwrap();
    let mean = cv.report.folds.iter().map(|f| f.macro_f1).sum::<f64>() / 3.0;
    assert!((cv.report.mean.macro_f1 - mean).abs() < 1e-12);
    let total: u64 = cv.report.confusion.iter().flatten().sum();
    assert_eq!(total as usize, features.n_samples());
    assert!(cross_validate(&features, &ModelConfig { epochs: 0, ..quick(2) }, 3).is_err());
}
