use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sta4clc::data::{
    aggregate_block_series, load_dataset, read_attribute_overrides, read_extra_disasters, Dataset, DatasetPaths,
    LoadOptions,
};
use sta4clc::graphs::{graph_for_dataset, MultiRelationalGraph};
use sta4clc::model::ModelConfig;
use sta4clc::resilience::{rolling_resilience_cached, SplineCache};
use sta4clc::synth::{generate, read_scenario_config};
use sta4clc::training::run::{read_json, write_json, write_run, RunConfig, TrainedRun, PREDICTIONS_FILE};
use sta4clc::training::{
    ablate as run_ablation, cross_validate, evaluate as score, prepare_features, write_ablation_csv, ClassScores,
    Features,
};

use crate::manifest::RunManifest;
use crate::{CliError, ConfigFlags, DataArgs, PredictArgs, RunArgs, SynthArgs};

pub const GRAPH_FILE: &str = "graph.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const RESILIENCE_FILE: &str = "resilience.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// A run configuration file, or a bare model configuration wrapped in the
/// default run settings.
fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let value: serde_json::Value = read_json(path)?;
    let is_run = value
        .as_object()
        .is_some_and(|o| o.keys().any(|k| matches!(k.as_str(), "model" | "features" | "graph" | "folds")));
    let parsed = if is_run {
        serde_json::from_value::<RunConfig>(value)
    } else {
        serde_json::from_value::<ModelConfig>(value).map(|model| RunConfig { model, ..Default::default() })
    };
    parsed.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn resolve_config(args: &DataArgs) -> Result<RunConfig, CliError> {
    let mut config = load_run_config(args.config.as_deref())?;
    let f: &ConfigFlags = &args.overrides;
    if let Some(s) = f.seed {
        config.model.seed = s;
    }
    if let Some(k) = f.folds {
        config.folds = k;
    }
    if let Some(e) = f.epochs {
        config.model.epochs = e;
    }
    if let Some(w) = f.window {
        config.features.resilience.window = w;
    }
    if let Some(b) = f.bins {
        config.features.resilience.bins = b;
    }
    if let Some(k) = f.k {
        config.graph.k = k;
    }
    if let Some(m) = f.min_sector_blocks {
        config.graph.sector.min_blocks = m;
    }
    config.model.validate()?;
    config.features.resilience.validate()?;
    if config.folds < 2 {
        return Err(CliError::usage(format!("--folds must be at least 2, got {}", config.folds)));
    }
    Ok(config)
}

fn load_data(dir: &Path, weeks: usize, config: &RunConfig, manifest: &mut RunManifest) -> Result<Dataset, CliError> {
    let paths = DatasetPaths::in_dir(dir);
    for p in [&paths.blocks, &paths.pois, &paths.weather, &paths.disasters] {
        manifest.hash_input(p)?;
    }
    let options = LoadOptions { t: weeks, missing_days: config.features.missing_days };
    Ok(load_dataset(&paths, &options)?)
}

fn load_graph(
    path: Option<&Path>,
    dataset: &Dataset,
    config: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<MultiRelationalGraph, CliError> {
    let graph = match path {
        Some(p) => {
            manifest.hash_input(p)?;
            MultiRelationalGraph::read_json(p)?
        }
        None => graph_for_dataset(dataset, config.graph.k, &config.graph.sector)?,
    };
    if graph.n_nodes != dataset.n_blocks() {
        return Err(CliError::data(format!(
            "graph has {} nodes but the data has {} blocks",
            graph.n_nodes,
            dataset.n_blocks()
        )));
    }
    Ok(graph)
}

fn finish(mut manifest: RunManifest, started: Instant, out: &Path) -> Result<(), CliError> {
    manifest.wall_time_seconds = started.elapsed().as_secs_f64();
    manifest.write(out)
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("synth");
    let mut config = match &args.config {
        Some(p) => {
            manifest.hash_input(p)?;
            read_scenario_config(p)?
        }
        None => Default::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let scenario = generate(&config)?;
    scenario.write(&args.out)?;
    manifest.seed = Some(config.seed);
    manifest.set_config(&config);
    log::info!("wrote {} blocks over {} periods to {}", config.n_blocks, config.n_periods, args.out.display());
    finish(manifest, started, &args.out)
}

pub fn resilience(args: &DataArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("resilience");
    let config = resolve_config(args)?;
    let dataset = load_data(&args.data, args.overrides.weeks, &config, &mut manifest)?;
    let mut cache = SplineCache::new();
    let mut text = String::from("block_id,period_id,week,resilience\n");
    for (p, period) in dataset.periods.iter().enumerate() {
        for id in &dataset.block_ids {
            let series = aggregate_block_series(&dataset, id, p)?;
            let visits: Vec<f64> = series.visits.iter().map(|&v| v as f64).collect();
            let r = rolling_resilience_cached(&visits, &config.features.resilience, &mut cache);
            for (w, value) in r.iter().enumerate() {
                let cell = value.map_or(String::new(), |v| v.to_string());
                text.push_str(&format!("{id},{},{w},{cell}\n", period.label));
            }
        }
    }
    create_dir(&args.out)?;
    write_text(&args.out.join(RESILIENCE_FILE), &text)?;
    manifest.set_config(&config.features);
    finish(manifest, started, &args.out)
}

pub fn graph(args: &DataArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("graph");
    let config = resolve_config(args)?;
    let dataset = load_data(&args.data, args.overrides.weeks, &config, &mut manifest)?;
    let graph = graph_for_dataset(&dataset, config.graph.k, &config.graph.sector)?;
    create_dir(&args.out)?;
    graph.write_json(&args.out.join(GRAPH_FILE))?;
    println!("relations: {}", graph.n_relations());
    for r in &graph.relations {
        log::info!("{}: {} edges", r.name, r.edges.len());
    }
    manifest.set_config(&config.graph);
    finish(manifest, started, &args.out)
}

fn features_for(
    args: &DataArgs,
    config: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<(Features, MultiRelationalGraph), CliError> {
    let dataset = load_data(&args.data, args.overrides.weeks, config, manifest)?;
    let graph = load_graph(args.graph.as_deref(), &dataset, config, manifest)?;
    let features = prepare_features(&dataset, &graph, &config.features)?;
    Ok((features, graph))
}

pub fn train(args: &DataArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("train");
    let config = resolve_config(args)?;
    if let Some(p) = &args.config {
        manifest.hash_input(p)?;
    }
    let (features, graph) = features_for(args, &config, &mut manifest)?;
    let cv = cross_validate(&features, &config.model, config.folds)?;
    write_run(&args.out, &config, &cv, &features)?;
    graph.write_json(&args.out.join(GRAPH_FILE))?;
    let m = &cv.report.mean;
    println!(
        "macro F1 {:.4}  precision {:.4}  recall {:.4}  accuracy {:.4}",
        m.macro_f1, m.macro_precision, m.macro_recall, m.accuracy
    );
    manifest.seed = Some(config.model.seed);
    manifest.set_config(&config);
    finish(manifest, started, &args.out)
}

pub fn ablate(args: &DataArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("ablate");
    let config = resolve_config(args)?;
    if let Some(p) = &args.config {
        manifest.hash_input(p)?;
    }
    let (features, _) = features_for(args, &config, &mut manifest)?;
    let rows = run_ablation(&features, &config.model, config.folds)?;
    create_dir(&args.out)?;
    let mut bytes = Vec::new();
    write_ablation_csv(&rows, &mut bytes)?;
    fs::write(args.out.join(ABLATION_FILE), &bytes)
        .map_err(|e| CliError::data(format!("{}: {e}", args.out.join(ABLATION_FILE).display())))?;
    for r in &rows {
        println!("{}: val F1 {:.4} ({:.3}x)", r.model, r.val_f1, r.improvement);
    }
    manifest.seed = Some(config.model.seed);
    manifest.set_config(&config);
    finish(manifest, started, &args.out)
}

/// Loads a run plus the data, with the run's own graph unless one is given.
fn load_run(
    args: &RunArgs,
    manifest: &mut RunManifest,
    edit: impl FnOnce(&mut Dataset) -> Result<(), CliError>,
) -> Result<(TrainedRun, Features), CliError> {
    let run = TrainedRun::load(&args.run)?;
    for name in ["params.bin", "manifest.json"] {
        manifest.hash_input(&args.run.join(name))?;
    }
    let mut dataset = load_data(&args.data, run.manifest.weeks, &run.config, manifest)?;
    if dataset.block_ids != run.manifest.block_ids || dataset.periods.len() != run.manifest.period_labels.len() {
        return Err(CliError::data(format!(
            "{} does not hold the blocks and periods the run was trained on",
            args.data.display()
        )));
    }
    edit(&mut dataset)?;
    let stored = args.run.join(GRAPH_FILE);
    let graph_path: Option<PathBuf> = args.graph.clone().or_else(|| stored.exists().then_some(stored));
    let graph = load_graph(graph_path.as_deref(), &dataset, &run.config, manifest)?;
    let features = prepare_features(&dataset, &graph, &run.config.features)?;
    if features.n_relations() != run.manifest.dims.n_relations {
        return Err(CliError::data(format!(
            "graph has {} relations but the run was trained with {}",
            features.n_relations(),
            run.manifest.dims.n_relations
        )));
    }
    Ok((run, features))
}

#[derive(Serialize)]
struct Evaluation {
    folds: Vec<ClassScores>,
    /// Scores over all validation samples pooled.
    pooled: ClassScores,
    mean_macro_f1: f64,
}

pub fn evaluate(args: &RunArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("evaluate");
    let (run, features) = load_run(args, &mut manifest, |_| Ok(()))?;
    let mut folds = Vec::with_capacity(run.models.len());
    let mut pooled = [[0u64; 3]; 3];
    for (k, model) in run.models.iter().enumerate() {
        let scores = score(model, &run.manifest.folds[k].scaler, &features, &run.plan.folds[k].validation)?;
        for (row, add) in pooled.iter_mut().zip(&scores.confusion) {
            for (c, a) in row.iter_mut().zip(add) {
                *c += a;
            }
        }
        folds.push(scores);
    }
    let mean_macro_f1 = folds.iter().map(|f| f.macro_f1).sum::<f64>() / folds.len().max(1) as f64;
    let report = Evaluation { folds, pooled: ClassScores::from_confusion(&pooled), mean_macro_f1 };
    create_dir(&args.out)?;
    write_json(&args.out.join(EVALUATION_FILE), &report)?;
    println!("mean macro F1 {mean_macro_f1:.4}");
    manifest.seed = Some(run.manifest.seed);
    manifest.set_config(&run.config);
    finish(manifest, started, &args.out)
}

/// Each sample is predicted by the fold model that held it out, with that
/// fold's stored scalers and decay rate.
pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("predict");
    for p in [&args.attributes, &args.disasters].into_iter().flatten() {
        manifest.hash_input(p)?;
    }
    let (run, features) = load_run(&args.run, &mut manifest, |dataset| {
        let attributes = match &args.attributes {
            Some(p) => read_attribute_overrides(p, dataset)?,
            None => Vec::new(),
        };
        let disasters = match &args.disasters {
            Some(p) => read_extra_disasters(p, dataset)?,
            None => Vec::new(),
        };
        dataset.apply_overrides(&attributes, disasters);
        Ok(())
    })?;
    let n = features.n_blocks();
    let labels = features.labels();
    let mut text = String::from("block_id,period_id,delta_y_hat,class_true,class_pred\n");
    for p in 0..features.periods.len() {
        let mut rows = vec![None; n];
        for (k, model) in run.models.iter().enumerate() {
            let mine: Vec<usize> = (0..n).filter(|&b| run.fold_of(p * n + b) == Some(k)).collect();
            if mine.is_empty() {
                continue;
            }
            let batch = run.manifest.folds[k].scaler.batch(&features, p)?;
            let records = model.predict(&batch, &features.block_ids)?;
            for b in mine {
                rows[b] = Some((records[b].delta_y_hat, records[b].class));
            }
        }
        for (b, row) in rows.into_iter().enumerate() {
            let (delta, class) =
                row.ok_or_else(|| CliError::data(format!("sample {} is in no validation fold", p * n + b)))?;
            text.push_str(&format!(
                "{},{},{delta},{},{class}\n",
                features.block_ids[b],
                features.period_labels[p],
                labels[p * n + b]
            ));
        }
    }
    create_dir(&args.run.out)?;
    write_text(&args.run.out.join(PREDICTIONS_FILE), &text)?;
    manifest.seed = Some(run.manifest.seed);
    manifest.set_config(&run.config);
    finish(manifest, started, &args.run.out)
}
