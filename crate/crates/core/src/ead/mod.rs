//! Embedded anomaly detection: per-point residuals from frozen sweeps,
//! dynamic thresholds, and the training loop that rewrites flagged points.

mod detect;
mod ledger;
pub mod threshold;
mod training;

pub use detect::{detect, write_reports, AnomalyReport};
pub use ledger::{ResidualLedger, ScoreMatrix};
pub use threshold::{
    dynamic_threshold, dynamic_threshold_segments, Flagged, GlobalThreshold, PerSeriesThreshold, ThresholdConfig,
    ThresholdMode, ThresholdRegistry,
};
pub use training::{
    evaluate, residual_sweep, run_training, run_training_with, write_history, EpochMetrics, TrainConfig,
    TrainingResult,
};
