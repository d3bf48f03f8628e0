use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nets::{NormModuleConfig, TapPoint, TaskNetConfig, TrainOptions};
use crate::pca::PcaConfig;
use crate::prior::{Estimator, PriorConfig};
use crate::synth::{AugmentConfig, BiasField, ShiftParams};
use crate::tta::{TtaConfig, TtaMethod, TtaOptimizer};

/// One shifted test domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub gamma: f64,
    pub bias: f64,
    pub noise: f64,
    pub offset: f64,
}

impl DomainShift {
    pub fn params(&self) -> ShiftParams {
        ShiftParams {
            gamma: self.gamma,
            bias_field: BiasField { amplitude: self.bias, n_bumps: 3 },
            noise_std: self.noise,
            brightness_offset: self.offset,
        }
    }
}

/// Every setting of every command, read from a flat `key = value` file.
///
/// Lines starting with `#` are comments. Lists are comma separated. Keys not
/// listed in [`RunConfig::KEYS`] are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub image_size: usize,
    pub n_slices: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_test_shifted: usize,
    /// Only the first `n_domains` entries of `domains` are generated.
    pub n_domains: usize,
    pub domains: Vec<DomainShift>,
    pub export_png: bool,

    pub norm_channels: Vec<usize>,
    pub unet_depth: usize,
    pub unet_base: usize,
    pub tap_point: TapPoint,
    pub train_iterations: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub val_every: usize,
    pub augment_p: f64,

    pub prior_bins: usize,
    pub kde_max_samples: usize,
    pub pca: PcaConfig,

    pub tta_methods: Vec<TtaMethod>,
    pub tta_estimators: Vec<Estimator>,
    pub tta_lambdas: Vec<f64>,
    pub tta_epochs: usize,
    pub tta_batch: usize,
    pub tta_lr: f64,
    pub tta_optimizer: TtaOptimizer,
    pub tta_kde_max_samples: usize,
    /// Domains to adapt; 0 is the source test set.
    pub tta_domains: Vec<u32>,
    /// Cap on adapted subjects per domain; 0 means all.
    pub tta_max_subjects: usize,

    pub n_perm: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            image_size: 64,
            n_slices: 8,
            n_classes: 3,
            n_train: 15,
            n_val: 5,
            n_test: 5,
            n_test_shifted: 5,
            n_domains: 2,
            domains: vec![
                DomainShift { gamma: 2.0, bias: 0.3, noise: 0.02, offset: 0.0 },
                DomainShift { gamma: 0.5, bias: 0.3, noise: 0.02, offset: 0.0 },
            ],
            export_png: false,
            norm_channels: NormModuleConfig::default().channels,
            unet_depth: 3,
            unet_base: 8,
            tap_point: TapPoint::PostActivation,
            train_iterations: 2000,
            train_batch: 8,
            train_lr: 1e-3,
            val_every: 100,
            augment_p: 0.25,
            prior_bins: 256,
            kde_max_samples: 10_000,
            pca: PcaConfig::default(),
            tta_methods: vec![TtaMethod::FoeCnnPca],
            tta_estimators: vec![Estimator::Gaussian],
            tta_lambdas: vec![0.1],
            tta_epochs: 100,
            tta_batch: 8,
            tta_lr: 1e-3,
            tta_optimizer: TtaOptimizer::Adam,
            tta_kde_max_samples: 2048,
            tta_domains: vec![0, 1, 2],
            tta_max_subjects: 0,
            n_perm: 10_000,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "out_dir",
        "image_size",
        "n_slices",
        "n_classes",
        "n_train",
        "n_val",
        "n_test",
        "n_test_shifted",
        "n_domains",
        "shift_gamma",
        "shift_bias",
        "shift_noise",
        "shift_offset",
        "export_png",
        "norm_channels",
        "unet_depth",
        "unet_base",
        "tap_point",
        "train_iterations",
        "train_batch",
        "train_lr",
        "val_every",
        "augment_p",
        "prior_bins",
        "kde_max_samples",
        "pca_r",
        "pca_d",
        "pca_tau",
        "pca_g",
        "tta_methods",
        "tta_estimators",
        "tta_lambdas",
        "tta_epochs",
        "tta_batch",
        "tta_lr",
        "tta_optimizer",
        "tta_kde_max_samples",
        "tta_domains",
        "tta_max_subjects",
        "n_perm",
    ];

    /// Parses config text. Relative `out_dir` values are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let (mut gammas, mut biases, mut noises, mut offsets) = (None, None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !Self::KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            match key {
                "seed" => cfg.seed = parse_value(key, value)?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "image_size" => cfg.image_size = parse_value(key, value)?,
                "n_slices" => cfg.n_slices = parse_value(key, value)?,
                "n_classes" => cfg.n_classes = parse_value(key, value)?,
                "n_train" => cfg.n_train = parse_value(key, value)?,
                "n_val" => cfg.n_val = parse_value(key, value)?,
                "n_test" => cfg.n_test = parse_value(key, value)?,
                "n_test_shifted" => cfg.n_test_shifted = parse_value(key, value)?,
                "n_domains" => cfg.n_domains = parse_value(key, value)?,
                "shift_gamma" => gammas = Some(parse_list::<f64>(key, value)?),
                "shift_bias" => biases = Some(parse_list::<f64>(key, value)?),
                "shift_noise" => noises = Some(parse_list::<f64>(key, value)?),
                "shift_offset" => offsets = Some(parse_list::<f64>(key, value)?),
                "export_png" => cfg.export_png = parse_bool(key, value)?,
                "norm_channels" => cfg.norm_channels = parse_list(key, value)?,
                "unet_depth" => cfg.unet_depth = parse_value(key, value)?,
                "unet_base" => cfg.unet_base = parse_value(key, value)?,
                "tap_point" => {
                    cfg.tap_point = match value {
                        "post" => TapPoint::PostActivation,
                        "pre" => TapPoint::PreActivation,
                        v => return Err(Error::Config(format!("tap_point: expected pre or post, got '{v}'"))),
                    }
                }
                "train_iterations" => cfg.train_iterations = parse_value(key, value)?,
                "train_batch" => cfg.train_batch = parse_value(key, value)?,
                "train_lr" => cfg.train_lr = parse_value(key, value)?,
                "val_every" => cfg.val_every = parse_value(key, value)?,
                "augment_p" => cfg.augment_p = parse_value(key, value)?,
                "prior_bins" => cfg.prior_bins = parse_value(key, value)?,
                "kde_max_samples" => cfg.kde_max_samples = parse_value(key, value)?,
                "pca_r" => cfg.pca.r = parse_value(key, value)?,
                "pca_d" => cfg.pca.d = parse_value(key, value)?,
                "pca_tau" => cfg.pca.tau = parse_value(key, value)?,
                "pca_g" => cfg.pca.g = parse_value(key, value)?,
                "tta_methods" => cfg.tta_methods = parse_list(key, value)?,
                "tta_estimators" => cfg.tta_estimators = parse_list(key, value)?,
                "tta_lambdas" => cfg.tta_lambdas = parse_list(key, value)?,
                "tta_epochs" => cfg.tta_epochs = parse_value(key, value)?,
                "tta_batch" => cfg.tta_batch = parse_value(key, value)?,
                "tta_lr" => cfg.tta_lr = parse_value(key, value)?,
                "tta_optimizer" => cfg.tta_optimizer = parse_value(key, value)?,
                "tta_kde_max_samples" => cfg.tta_kde_max_samples = parse_value(key, value)?,
                "tta_domains" => cfg.tta_domains = parse_list(key, value)?,
                "tta_max_subjects" => cfg.tta_max_subjects = parse_value(key, value)?,
                "n_perm" => cfg.n_perm = parse_value(key, value)?,
                _ => unreachable!("key list and match arms disagree on '{key}'"),
            }
        }
        if gammas.is_some() || biases.is_some() || noises.is_some() || offsets.is_some() {
            let gammas = gammas.ok_or_else(|| Error::Config("shift_gamma is required with other shift keys".into()))?;
            let n = gammas.len();
            let fill = |v: Option<Vec<f64>>, name: &str, default: f64| -> Result<Vec<f64>> {
                match v {
                    None => Ok(vec![default; n]),
                    Some(v) if v.len() == n => Ok(v),
                    Some(v) => Err(Error::Config(format!("{name} has {} entries, shift_gamma has {n}", v.len()))),
                }
            };
            let biases = fill(biases, "shift_bias", 0.0)?;
            let noises = fill(noises, "shift_noise", 0.0)?;
            let offsets = fill(offsets, "shift_offset", 0.0)?;
            cfg.domains = (0..n)
                .map(|i| DomainShift { gamma: gammas[i], bias: biases[i], noise: noises[i], offset: offsets[i] })
                .collect();
            if !seen.contains("n_domains") {
                cfg.n_domains = n;
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = std::env::current_dir()?;
        Self::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_domains > self.domains.len() {
            return fail(format!("n_domains = {} but only {} shifts are defined", self.n_domains, self.domains.len()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return fail("n_train and n_val must be positive".into());
        }
        if self.n_slices == 0 || self.train_batch == 0 || self.tta_batch == 0 {
            return fail("slice and batch counts must be positive".into());
        }
        if !self.image_size.is_multiple_of(1 << self.unet_depth.saturating_sub(1)) {
            return fail(format!("image_size {} is not divisible by 2^(unet_depth - 1)", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.augment_p) {
            return fail(format!("augment_p {} outside [0, 1]", self.augment_p));
        }
        if self.tta_methods.is_empty() || self.tta_estimators.is_empty() || self.tta_lambdas.is_empty() {
            return fail("tta_methods, tta_estimators and tta_lambdas need at least one entry".into());
        }
        if let Some(d) = self.tta_domains.iter().find(|d| **d as usize > self.n_domains) {
            return fail(format!("tta_domains names domain {d} but n_domains = {}", self.n_domains));
        }
        if self.n_perm == 0 {
            return fail("n_perm must be positive".into());
        }
        self.pca.validate()?;
        Ok(())
    }

    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = if o.is_relative() { std::env::current_dir()?.join(o) } else { o };
        }
        Ok(self)
    }

    pub fn norm_config(&self) -> NormModuleConfig {
        NormModuleConfig { channels: self.norm_channels.clone(), ..NormModuleConfig::default() }
    }

    pub fn task_config(&self) -> TaskNetConfig {
        TaskNetConfig {
            depth: self.unet_depth,
            base_channels: self.unet_base,
            n_classes: self.n_classes,
            tap_point: self.tap_point,
            ..TaskNetConfig::default()
        }
    }

    pub fn train_options(&self, strong: bool) -> TrainOptions {
        TrainOptions {
            augment: strong.then(|| AugmentConfig { p: self.augment_p, ..AugmentConfig::default() }),
            iterations: self.train_iterations,
            batch: self.train_batch,
            lr: self.train_lr,
            val_every: self.val_every,
            seed: self.seed,
        }
    }

    pub fn prior_config(&self, estimator: Estimator) -> PriorConfig {
        PriorConfig {
            estimator,
            n_bins: self.prior_bins,
            kde_max_samples: self.kde_max_samples,
            pca: Some(self.pca),
            batch: self.tta_batch,
        }
    }

    pub fn tta_config(&self, method: TtaMethod, estimator: Estimator, lambda: f64) -> TtaConfig {
        TtaConfig {
            method,
            n_epochs: self.tta_epochs,
            batch: self.tta_batch,
            lr: self.tta_lr,
            lambda,
            estimator,
            optimizer: self.tta_optimizer,
            kde_max_samples: self.tta_kde_max_samples,
            seed: self.seed,
        }
    }

    /// Renders the config back to the text format; `parse(render())` round-trips.
    pub fn render(&self) -> String {
        let domains = &self.domains;
        let tap = match self.tap_point {
            TapPoint::PostActivation => "post",
            TapPoint::PreActivation => "pre",
        };
        let lines = [
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("image_size", self.image_size.to_string()),
            ("n_slices", self.n_slices.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("n_test_shifted", self.n_test_shifted.to_string()),
            ("n_domains", self.n_domains.to_string()),
            ("shift_gamma", join(&domains.iter().map(|d| d.gamma).collect::<Vec<_>>())),
            ("shift_bias", join(&domains.iter().map(|d| d.bias).collect::<Vec<_>>())),
            ("shift_noise", join(&domains.iter().map(|d| d.noise).collect::<Vec<_>>())),
            ("shift_offset", join(&domains.iter().map(|d| d.offset).collect::<Vec<_>>())),
            ("export_png", self.export_png.to_string()),
            ("norm_channels", join(&self.norm_channels)),
            ("unet_depth", self.unet_depth.to_string()),
            ("unet_base", self.unet_base.to_string()),
            ("tap_point", tap.to_string()),
            ("train_iterations", self.train_iterations.to_string()),
            ("train_batch", self.train_batch.to_string()),
            ("train_lr", self.train_lr.to_string()),
            ("val_every", self.val_every.to_string()),
            ("augment_p", self.augment_p.to_string()),
            ("prior_bins", self.prior_bins.to_string()),
            ("kde_max_samples", self.kde_max_samples.to_string()),
            ("pca_r", self.pca.r.to_string()),
            ("pca_d", self.pca.d.to_string()),
            ("pca_tau", self.pca.tau.to_string()),
            ("pca_g", self.pca.g.to_string()),
            ("tta_methods", join(&self.tta_methods)),
            ("tta_estimators", join(&self.tta_estimators)),
            ("tta_lambdas", join(&self.tta_lambdas)),
            ("tta_epochs", self.tta_epochs.to_string()),
            ("tta_batch", self.tta_batch.to_string()),
            ("tta_lr", self.tta_lr.to_string()),
            ("tta_optimizer", self.tta_optimizer.to_string()),
            ("tta_kde_max_samples", self.tta_kde_max_samples.to_string()),
            ("tta_domains", join(&self.tta_domains)),
            ("tta_max_subjects", self.tta_max_subjects.to_string()),
            ("n_perm", self.n_perm.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
