//! Per-subject test-time adaptation of the normalization module.

mod config;
mod engine;
mod stats;

pub use config::{TtaConfig, TtaMethod, TtaOptimizer};
pub use engine::{
    adapt_subject, compute_test_stats, entropy_min_adapt, matching_loss_gradient, TtaOutcome, TtaRow, TtaTrace,
};
pub use stats::TestStats;
