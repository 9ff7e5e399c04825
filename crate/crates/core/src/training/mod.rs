//! Full-batch training, stratified cross-validation, metrics and the
//! module ablation grid.

mod ablation;
mod features;
mod fit;
mod folds;
mod metrics;
pub mod run;

pub use ablation::{ablate, ablate_grid, write_ablation_csv, AblationFlags, AblationRow, ABLATION_GRID};
pub use features::{prepare_features, FeatureConfig, FeatureScaler, Features, PeriodFeatures};
pub use fit::{
    cross_validate, cross_validate_with, evaluate, fold_seed, train_fold, CrossValidation, EpochRecord, FoldMetrics,
    FoldResult, MetricsReport, SamplePrediction,
};
pub use folds::{kfold_split, Fold, FoldPlan};
pub use metrics::{confusion, macro_f1, ClassScores, Confusion};
