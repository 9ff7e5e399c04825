use std::io::Write;

use serde::{Deserialize, Serialize};

use super::features::Features;
use super::fit::cross_validate_with;
use super::folds::kfold_split;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Module switches of one ablation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub disaster_impact: bool,
    pub diffusion_constraint: bool,
    pub multi_relation: bool,
}

/// The eight variants, M1 (none of the modules) through M8 (all three).
pub const ABLATION_GRID: [(&str, AblationFlags); 8] = {
    const fn f(d: bool, c: bool, m: bool) -> AblationFlags {
        AblationFlags { disaster_impact: d, diffusion_constraint: c, multi_relation: m }
    }
    [
        ("M1", f(false, false, false)),
        ("M2", f(false, true, false)),
        ("M3", f(false, false, true)),
        ("M4", f(true, false, false)),
        ("M5", f(false, true, true)),
        ("M6", f(true, true, false)),
        ("M7", f(true, false, true)),
        ("M8", f(true, true, true)),
    ]
};

impl AblationFlags {
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_disaster_bias: self.disaster_impact,
            use_diffusion_loss: self.diffusion_constraint,
            use_multi_relation: self.multi_relation,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    /// Mean over folds of the lowest training loss.
    pub train_loss: f64,
    /// Mean over folds of the training F1 at the selected epoch.
    pub train_f1: f64,
    pub val_f1: f64,
    /// `val_f1` divided by the first row's.
    pub improvement: f64,
    pub flags: AblationFlags,
}

/// Cross-validates every variant in `grid` on the same folds with the same
/// seed. The first variant is the reference for the improvement ratio.
pub fn ablate_grid(
    features: &Features,
    base: &ModelConfig,
    k: usize,
    grid: &[(&str, AblationFlags)],
) -> Result<Vec<AblationRow>> {
    let plan = kfold_split(k, &features.labels(), base.seed)?;
    let mut rows: Vec<AblationRow> = Vec::with_capacity(grid.len());
    for (name, flags) in grid {
        let started = std::time::Instant::now();
        let cv = cross_validate_with(features, &flags.apply(base), plan.clone())?;
        let m = &cv.report.mean;
        log::info!("{name}: val F1 {:.4} ({:.1}s)", m.macro_f1, started.elapsed().as_secs_f64());
        rows.push(AblationRow {
            model: name.to_string(),
            train_loss: m.best_loss,
            train_f1: m.train_f1,
            val_f1: m.macro_f1,
            improvement: f64::NAN,
            flags: *flags,
        });
    }
    let reference = rows.first().map(|r| r.val_f1).unwrap_or(f64::NAN);
    if !(reference > 0.0) {
        return Err(Error::Numeric(format!("reference variant has validation F1 {reference}")));
    }
    for r in &mut rows {
        r.improvement = r.val_f1 / reference;
    }
    Ok(rows)
}

/// The full M1 to M8 grid.
pub fn ablate(features: &Features, base: &ModelConfig, k: usize) -> Result<Vec<AblationRow>> {
    ablate_grid(features, base, k, &ABLATION_GRID)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

/// Writes the table with columns model, train_loss, train_f1, val_f1,
/// improvement and the three Yes/No module columns. Floats use shortest
/// round-trip formatting.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("writing ablation table: {e}"));
    w.write_record([
        "model",
        "train_loss",
        "train_f1",
        "val_f1",
        "improvement",
        "disaster_impact",
        "diffusion_constraint",
        "multi_relation",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.train_loss.to_string(),
            r.train_f1.to_string(),
            r.val_f1.to_string(),
            r.improvement.to_string(),
            yes_no(r.flags.disaster_impact).into(),
            yes_no(r.flags.diffusion_constraint).into(),
            yes_no(r.flags.multi_relation).into(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing ablation table: {e}")))?;
    Ok(())
}
