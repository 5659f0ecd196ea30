//! Timestamp self-scheduling and the two-phase training objective.

pub mod stats;

pub use stats::{accumulate_counts, assign_timestamps, assignment_score, churn, greedy_assignment, StatMatrix};
pub mod loss;

pub use loss::{forecast_loss, pretrain_loss, ForecastLoss, FrameTarget, LossTerms, PretrainLoss};
