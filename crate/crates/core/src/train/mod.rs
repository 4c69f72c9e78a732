pub mod batching;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use batching::{equalize_species, make_batches, BalancedBatch};
pub use loss::{cb_focal_loss, class_balanced_weights, total_loss, LossConfig};
pub use optim::{step_decay_lr, Adam, AdamConfig};
pub use trainer::{train, write_curves_csv, BestTracker, CurvePoint, Split, TrainConfig, TrainOutcome, TrainSplit};
