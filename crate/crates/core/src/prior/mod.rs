//! Field-of-experts priors: per-subject 1D expert densities.

mod build;
mod pdf;
mod set;

pub use build::{
    active_patches, build_prior_set, channel_planes, compute_gaussian_pdfs, compute_kde_pdfs, kde_gaussian_divergence,
    loading_pdfs, shared_spans, tap_moments, PriorConfig,
};
pub use pdf::{
    bin_centers, default_span, gaussian_grid, grouped_moments, kde_grid, kde_sums, moments, silverman_alpha,
    stride_subsample, ExpertPdf, GridPdf, Moments, DEFAULT_BINS, GRID_HALF_WIDTH, MIN_BINS, SIGMA_FLOOR,
};
pub use set::{load_prior, save_prior, Estimator, ExpertKey, ExpertMap, LoadedPrior, PriorSet, SubjectPrior};
