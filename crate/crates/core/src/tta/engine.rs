use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{TtaConfig, TtaMethod, TtaOptimizer};
use super::stats::{
    batch_surrogate, compute_stats, forward_batches, loss_gradients, BatchPass, StatsRequest, TestStats,
};
use crate::divergence::{loss_foe_cnn, loss_foe_cnn_pca, LossBreakdown};
use crate::error::{Error, Result};
use crate::nets::{dice_scores, entropy_loss, predict_labels, Model};
use crate::prior::PriorSet;
use crate::synth::Subject;
use crate::tensor::{AdamState, Tensor};

/// One epoch of an adaptation run. Epoch 0 is before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct TtaRow {
    pub epoch: usize,
    pub loss_total: f64,
    /// Zero for entropy minimization.
    pub loss_cnn: f64,
    pub loss_pca: f64,
    pub pca_dropped: bool,
    /// Hard Dice per foreground class, for evaluation only.
    pub dice_per_class: Vec<f64>,
    pub dice_mean: f64,
    pub phi_norm: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TtaTrace {
    pub rows: Vec<TtaRow>,
}

impl TtaTrace {
    pub fn first(&self) -> Option<&TtaRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TtaRow> {
        self.rows.last()
    }
}

pub struct TtaOutcome {
    /// The input model with adapted normalization parameters.
    pub model: Model,
    pub trace: TtaTrace,
    /// Set when a non-finite loss or gradient stopped the run; `model` then holds
    /// the parameters of the lowest-loss epoch.
    pub diverged: Option<String>,
}

fn dice_of_passes(passes: &[BatchPass], subject: &Subject, k: usize) -> Result<Vec<f64>> {
    let hw = subject.pixels_per_slice();
    let mut pred = vec![0u8; subject.n_slices() * hw];
    for p in passes {
        let labels = predict_labels(p.tape.value(p.out.probs))?;
        for (i, s) in p.slices.iter().enumerate() {
            pred[s * hw..(s + 1) * hw].copy_from_slice(&labels[i * hw..(i + 1) * hw]);
        }
    }
    dice_scores(&pred, &subject.labels, k)
}

fn apply_update(model: &mut Model, grads: &[Tensor], cfg: &TtaConfig, adam: &mut Option<AdamState>) -> Result<()> {
    let mut params = model.norm.params_mut();
    match adam {
        Some(a) => a.step(&mut params, grads),
        None => {
            for (p, g) in params.iter_mut().zip(grads) {
                p.data_mut().iter_mut().zip(g.data()).for_each(|(x, d)| *x -= cfg.lr * d);
            }
            Ok(())
        }
    }
}

fn accumulate(acc: &mut [Tensor], pass: &BatchPass, root: crate::tensor::Var) -> Result<()> {
    let grads = pass.tape.backward(root)?;
    for (a, v) in acc.iter_mut().zip(&pass.out.norm_params) {
        if let Some(g) = grads.get(*v) {
            a.data_mut().iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
    }
    Ok(())
}

struct Runner<'a> {
    model: Model,
    subject: &'a Subject,
    cfg: &'a TtaConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    adam: Option<AdamState>,
    start: Instant,
    trace: TtaTrace,
    best: Option<(f64, Model)>,
}

impl<'a> Runner<'a> {
    fn new(model: &Model, subject: &'a Subject, cfg: &'a TtaConfig) -> Result<Self> {
        cfg.validate()?;
        if subject.n_slices() == 0 {
            return Err(Error::invalid(format!("subject '{}' has no slices", subject.id)));
        }
        Ok(Self {
            model: model.clone(),
            subject,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..subject.n_slices()).collect(),
            adam: (cfg.optimizer == TtaOptimizer::Adam).then(|| AdamState::new(cfg.lr)),
            start: Instant::now(),
            trace: TtaTrace::default(),
            best: None,
        })
    }

    fn forward(&mut self) -> Result<Vec<BatchPass>> {
        self.order.shuffle(&mut self.rng);
        forward_batches(&self.model, self.subject, &self.order, self.cfg.batch)
    }

    fn record(&mut self, epoch: usize, passes: &[BatchPass], loss: (f64, f64, f64, bool)) -> Result<()> {
        let dice = dice_of_passes(passes, self.subject, self.model.n_classes())?;
        let dice_mean = dice.iter().sum::<f64>() / dice.len() as f64;
        self.trace.rows.push(TtaRow {
            epoch,
            loss_total: loss.0,
            loss_cnn: loss.1,
            loss_pca: loss.2,
            pca_dropped: loss.3,
            dice_per_class: dice,
            dice_mean,
            phi_norm: self.model.norm.param_norm(),
            wall_ms: self.start.elapsed().as_millis(),
        });
        if self.best.as_ref().is_none_or(|(b, _)| loss.0 < *b) {
            self.best = Some((loss.0, self.model.clone()));
        }
        Ok(())
    }

    fn step(&mut self, grads: Vec<Tensor>) -> std::result::Result<(), String> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err("non-finite gradient".into());
        }
        apply_update(&mut self.model, &grads, self.cfg, &mut self.adam).map_err(|e| e.to_string())?;
        if self.model.norm.params().iter().any(|p| !p.is_finite()) {
            return Err("non-finite parameters after update".into());
        }
        Ok(())
    }

    fn zero_grads(&self) -> Vec<Tensor> {
        self.model.norm.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    fn finish(self, diverged: Option<String>) -> TtaOutcome {
        let model = match (&diverged, self.best) {
            (Some(msg), Some((_, best))) => {
                warn!("adaptation of '{}' stopped: {msg}; returning the lowest-loss parameters", self.subject.id);
                best
            }
            _ => self.model,
        };
        TtaOutcome { model, trace: self.trace, diverged }
    }
}

fn breakdown(priors: &PriorSet, stats: &TestStats, cfg: &TtaConfig) -> Result<LossBreakdown> {
    match cfg.method {
        TtaMethod::FoeCnn => loss_foe_cnn(&priors.subjects, &stats.cnn),
        _ => loss_foe_cnn_pca(&priors.subjects, &stats.cnn, stats.pca.as_ref(), cfg.lambda),
    }
}

/// Adapts the normalization module to one test subject by matching its expert
/// statistics to the training priors. Only normalization parameters change.
pub fn adapt_subject(
    model: &Model,
    priors: &PriorSet,
    model_fingerprint: u64,
    subject: &Subject,
    cfg: &TtaConfig,
) -> Result<TtaOutcome> {
    if cfg.method == TtaMethod::EntropyMin {
        return entropy_min_adapt(model, subject, cfg);
    }
    if priors.model_fingerprint != model_fingerprint {
        return Err(Error::Fingerprint { expected: model_fingerprint, found: priors.model_fingerprint });
    }
    if priors.estimator != cfg.estimator {
        return Err(Error::Config(format!(
            "prior holds {} experts but TTA asks for {}",
            priors.estimator, cfg.estimator
        )));
    }
    priors.validate()?;
    let basis = match cfg.method {
        TtaMethod::FoeCnnPca => Some(
            priors.basis.as_ref().ok_or_else(|| Error::Config("foe_cnn_pca needs a prior with a PCA basis".into()))?,
        ),
        _ => None,
    };
    let mut run = Runner::new(model, subject, cfg)?;
    let req = StatsRequest {
        estimator: cfg.estimator,
        reference: &priors.subjects[0],
        basis,
        kde_max_samples: cfg.kde_max_samples,
    };
    let mut warned = false;
    for epoch in 0..=cfg.n_epochs {
        let mut passes = run.forward()?;
        let stats = compute_stats(&passes, subject.n_slices(), &req)?;
        if basis.is_some() && stats.pca.is_none() && !warned {
            warn!("subject '{}' has no active patches; PCA experts dropped", subject.id);
            warned = true;
        }
        let b = breakdown(priors, &stats, cfg)?;
        if !b.total.is_finite() {
            return Ok(run.finish(Some(format!("non-finite loss at epoch {epoch}"))));
        }
        run.record(epoch, &passes, (b.total, b.cnn_term, b.pca_term, b.pca_dropped))?;
        if epoch == cfg.n_epochs {
            break;
        }
        let grads = loss_gradients(&priors.subjects, &stats, cfg.lambda)?;
        let mut acc = run.zero_grads();
        for pass in passes.iter_mut() {
            if let Some(root) = batch_surrogate(pass, &stats, &grads, basis)? {
                accumulate(&mut acc, pass, root)?;
            }
        }
        drop(passes);
        if let Err(msg) = run.step(acc) {
            return Ok(run.finish(Some(format!("{msg} at epoch {epoch}"))));
        }
    }
    Ok(run.finish(None))
}

/// Adapts the normalization module by minimizing the mean per-pixel prediction entropy.
pub fn entropy_min_adapt(model: &Model, subject: &Subject, cfg: &TtaConfig) -> Result<TtaOutcome> {
    let mut run = Runner::new(model, subject, cfg)?;
    let total_slices = subject.n_slices() as f64;
    for epoch in 0..=cfg.n_epochs {
        let mut passes = run.forward()?;
        let mut roots = Vec::with_capacity(passes.len());
        let mut loss = 0.0;
        for pass in passes.iter_mut() {
            let e = entropy_loss(&mut pass.tape, pass.out.probs)?;
            let share = pass.tape.scale(e, pass.slices.len() as f64 / total_slices);
            loss += pass.tape.value(share).item()?;
            roots.push(share);
        }
        if !loss.is_finite() {
            return Ok(run.finish(Some(format!("non-finite entropy at epoch {epoch}"))));
        }
        run.record(epoch, &passes, (loss, 0.0, 0.0, false))?;
        if epoch == cfg.n_epochs {
            break;
        }
        let mut acc = run.zero_grads();
        for (pass, root) in passes.iter().zip(roots) {
            accumulate(&mut acc, pass, root)?;
        }
        drop(passes);
        if let Err(msg) = run.step(acc) {
            return Ok(run.finish(Some(format!("{msg} at epoch {epoch}"))));
        }
    }
    Ok(run.finish(None))
}

/// Test-side statistics of `subject` under `model`, as used at epoch 0 of an adaptation.
pub fn compute_test_stats(model: &Model, priors: &PriorSet, subject: &Subject, cfg: &TtaConfig) -> Result<TestStats> {
    let basis = if cfg.method == TtaMethod::FoeCnnPca { priors.basis.as_ref() } else { None };
    let order: Vec<usize> = (0..subject.n_slices()).collect();
    let passes = forward_batches(model, subject, &order, cfg.batch)?;
    let req = StatsRequest {
        estimator: cfg.estimator,
        reference: &priors.subjects[0],
        basis,
        kde_max_samples: cfg.kde_max_samples,
    };
    compute_stats(&passes, subject.n_slices(), &req)
}

/// Gradient of the matching loss with respect to the normalization parameters,
/// accumulated over batches of `cfg.batch` slices in subject order.
pub fn matching_loss_gradient(
    model: &Model,
    priors: &PriorSet,
    subject: &Subject,
    cfg: &TtaConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let basis = if cfg.method == TtaMethod::FoeCnnPca { priors.basis.as_ref() } else { None };
    let order: Vec<usize> = (0..subject.n_slices()).collect();
    let mut passes = forward_batches(model, subject, &order, cfg.batch)?;
    let req = StatsRequest {
        estimator: cfg.estimator,
        reference: &priors.subjects[0],
        basis,
        kde_max_samples: cfg.kde_max_samples,
    };
    let stats = compute_stats(&passes, subject.n_slices(), &req)?;
    let lambda = if basis.is_some() { cfg.lambda } else { 0.0 };
    let grads = loss_gradients(&priors.subjects, &stats, lambda)?;
    let mut acc: Vec<Tensor> = model.norm.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for pass in passes.iter_mut() {
        if let Some(root) = batch_surrogate(pass, &stats, &grads, basis)? {
            accumulate(&mut acc, pass, root)?;
        }
    }
    Ok((grads.total, acc))
}
