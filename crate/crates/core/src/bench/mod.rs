//! Run configuration, the pipeline commands, metrics, reports and self-checks
//! behind the `foe-tta` binary.

pub mod checks;
mod config;
mod metrics;
mod permutation;
mod pipeline;
mod report;
mod selfcheck;

pub use config::{DomainShift, RunConfig};
pub use metrics::{
    parse_metrics, read_metrics, render_metrics, write_metrics, MetricsRow, METRICS_HEADER, METRICS_VERSION_LINE,
};
pub use permutation::paired_permutation_test;
pub use pipeline::{
    artifact_seconds, cmd_build_prior, cmd_evaluate, cmd_make_data, cmd_train, cmd_tta, compare_to_baseline,
    load_dataset, load_matching_prior, plan_runs, plan_subjects, read_manifest, realize_subject, render_manifest,
    subject_dice, tta_subjects, Comparison, Dataset, Layout, ManifestEntry, Split, TtaRun, BASELINES,
};
pub use report::{bar_chart, cmd_report, line_chart};
pub use selfcheck::{cmd_selfcheck, run_selfcheck, SelfcheckOptions, SelfcheckReport};

use crate::error::{Error, Result};

/// Sizes the global rayon pool from `FOE_TTA_THREADS`, defaulting to the CPU
/// count. Returns the thread count in effect.
pub fn init_thread_pool() -> Result<usize> {
    let requested = match std::env::var("FOE_TTA_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| Error::Config(format!("FOE_TTA_THREADS must be a positive integer, got '{v}'")))?,
        ),
        Err(_) => None,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = requested {
        builder = builder.num_threads(n);
    }
    // A pool that already exists (tests, repeated calls) is kept as is.
    let _ = builder.build_global();
    Ok(rayon::current_num_threads())
}
