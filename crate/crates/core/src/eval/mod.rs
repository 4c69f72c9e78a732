pub mod bnstats;
pub mod folds;
pub mod metrics;

pub use bnstats::{bn_stats_csv, bn_stats_export, inter_species_divergence, BnStatsRow};
pub use folds::{rotation, stratified_folds, FoldPlan, Rotation};
pub use metrics::{compute_metrics, mean_std, Averaging, ConfusionMatrix, Metrics};
