use std::str::FromStr;

use crate::divergence::DEFAULT_LAMBDA;
use crate::error::{Error, Result};
use crate::prior::Estimator;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtaMethod {
    FoeCnn,
    FoeCnnPca,
    EntropyMin,
}

impl FromStr for TtaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foe_cnn" => Ok(TtaMethod::FoeCnn),
            "foe_cnn_pca" => Ok(TtaMethod::FoeCnnPca),
            "entropy_min" => Ok(TtaMethod::EntropyMin),
            _ => Err(Error::Config(format!("unknown TTA method '{s}' (foe_cnn|foe_cnn_pca|entropy_min)"))),
        }
    }
}

impl std::fmt::Display for TtaMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TtaMethod::FoeCnn => "foe_cnn",
            TtaMethod::FoeCnnPca => "foe_cnn_pca",
            TtaMethod::EntropyMin => "entropy_min",
        })
    }
}

/// Update rule applied once per epoch to the accumulated gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtaOptimizer {
    GradientDescent,
    Adam,
}

impl FromStr for TtaOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(TtaOptimizer::GradientDescent),
            "adam" => Ok(TtaOptimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer '{s}' (gd|adam)"))),
        }
    }
}

impl std::fmt::Display for TtaOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TtaOptimizer::GradientDescent => "gd",
            TtaOptimizer::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaConfig {
    pub method: TtaMethod,
    pub n_epochs: usize,
    /// Slices per forward batch.
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub estimator: Estimator,
    pub optimizer: TtaOptimizer,
    /// Per-expert cap on test-side KDE samples.
    pub kde_max_samples: usize,
    /// Shuffles slices into batches.
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            method: TtaMethod::FoeCnnPca,
            n_epochs: 100,
            batch: 8,
            lr: 1e-3,
            lambda: DEFAULT_LAMBDA,
            estimator: Estimator::Gaussian,
            optimizer: TtaOptimizer::Adam,
            kde_max_samples: 2048,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("tta batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("tta lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.kde_max_samples == 0 {
            return Err(Error::Config("kde_max_samples must be positive".into()));
        }
        Ok(())
    }
}
