use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::ModelCheckpoint;
use super::loss::{dice_loss, dice_scores, one_hot, predict_labels};
use super::model::{ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::synth::{augment_batch, AugmentConfig, Subject};
use crate::tensor::{AdamState, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Stacked augmentation for the strong baseline; `None` trains the plain baseline.
    pub augment: Option<AugmentConfig>,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Validation cadence in iterations; the final iteration is always validated.
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { augment: None, iterations: 2000, batch: 8, lr: 1e-3, val_every: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub val_dice: Option<f64>,
    pub elapsed_ms: u128,
}

pub struct TrainOutcome {
    /// Parameters at the best validation Dice.
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<TrainLogRow>,
}

/// Mean over subjects of the foreground-averaged volume Dice.
pub fn evaluate_dice(model: &Model, subjects: &[Subject]) -> Result<f64> {
    if subjects.is_empty() {
        return Err(Error::invalid("no subjects to evaluate"));
    }
    let mut total = 0.0;
    for s in subjects {
        let pred = model.predict(&s.slices, 8)?;
        let labels = predict_labels(&pred.probs)?;
        let d = dice_scores(&labels, &s.labels, model.n_classes())?;
        total += d.iter().sum::<f64>() / d.len() as f64;
    }
    Ok(total / subjects.len() as f64)
}

/// Supervised training with the Dice loss and Adam; keeps the parameters with
/// the best validation Dice.
pub fn train_supervised(
    mut model: Model,
    train: &[Subject],
    val: &[Subject],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("training needs at least one subject"));
    }
    if opts.batch == 0 || opts.lr <= 0.0 {
        return Err(Error::invalid("batch must be positive and lr > 0"));
    }
    let (h, w) = train[0].size();
    if train.iter().chain(val).any(|s| s.size() != (h, w)) {
        return Err(Error::shape("all subjects must share one slice size"));
    }
    let k = model.n_classes();
    let index: Vec<(usize, usize)> =
        train.iter().enumerate().flat_map(|(si, s)| (0..s.n_slices()).map(move |i| (si, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new(opts.lr);
    let mut log = Vec::new();
    let mut best: Option<(f64, ModelCheckpoint)> = None;
    let start = Instant::now();
    let hw = h * w;

    for it in 1..=opts.iterations {
        let mut images = Vec::with_capacity(opts.batch * hw);
        let mut labels = Vec::with_capacity(opts.batch * hw);
        for _ in 0..opts.batch {
            let (si, i) = index[rng.gen_range(0..index.len())];
            images.extend_from_slice(&train[si].slices.data()[i * hw..(i + 1) * hw]);
            labels.extend_from_slice(train[si].slice_labels(i));
        }
        let mut x = Tensor::new(vec![opts.batch, 1, h, w], images)?;
        if let Some(aug) = &opts.augment {
            (x, labels) = augment_batch(&x, &labels, aug, &mut rng)?;
        }
        let target = one_hot(&labels, opts.batch, k, h, w)?;

        let mut tape = Tape::new();
        let out = model.forward_with_taps(&mut tape, &x, ForwardOptions::train())?;
        let t = tape.constant(target);
        let loss = dice_loss(&mut tape, out.probs, t)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::Divergence { iteration: it, detail: format!("loss = {loss_value}") });
        }
        let grads = tape.backward(loss).map_err(|e| Error::Divergence { iteration: it, detail: e.to_string() })?;
        let mut all_grads: Vec<Tensor> = out.norm_params.iter().map(|v| grads.wrt(*v)).collect();
        all_grads.extend(out.task_params.iter().map(|v| grads.wrt(*v)));
        {
            let mut params = model.norm.params_mut();
            params.extend(model.task.params_mut());
            adam.step(&mut params, &all_grads)
                .map_err(|e| Error::Divergence { iteration: it, detail: e.to_string() })?;
        }
        for (bn, (m, v)) in model.task.bns.iter_mut().zip(&out.bn_batch_stats) {
            bn.update_running(m, v);
        }

        let validate = it % opts.val_every.max(1) == 0 || it == opts.iterations;
        let val_dice = if validate && !val.is_empty() { Some(evaluate_dice(&model, val)?) } else { None };
        if validate {
            let score = val_dice.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _)| score > *b || val.is_empty()) {
                best = Some((score, ModelCheckpoint { model: model.clone(), iteration: it, val_dice }));
            }
            info!("iter {it}: loss {loss_value:.4} val dice {val_dice:?}");
        } else {
            debug!("iter {it}: loss {loss_value:.4}");
        }
        log.push(TrainLogRow { iteration: it, loss: loss_value, val_dice, elapsed_ms: start.elapsed().as_millis() });
    }

    let checkpoint = match best {
        Some((_, c)) => c,
        None => ModelCheckpoint { model, iteration: 0, val_dice: None },
    };
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{NormModuleConfig, TaskNetConfig};
    use crate::synth::generate_subject;

    fn small_model() -> Model {
        Model::new(
            NormModuleConfig { channels: vec![4, 4, 1], kernel: 3 },
            TaskNetConfig { depth: 2, base_channels: 4, n_classes: 2, ..TaskNetConfig::default() },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let m = small_model();
        let s = generate_subject(1, 2, 2, 16).unwrap();
        let out =
            train_supervised(m.clone(), &[s], &[], &TrainOptions { iterations: 0, ..TrainOptions::default() }).unwrap();
        assert_eq!(out.checkpoint.model, m);
        assert_eq!(out.checkpoint.iteration, 0);
        assert!(out.log.is_empty());
    }

    #[test]
    fn short_run_reduces_loss_and_selects_best() {
        let train: Vec<_> = (0..3).map(|i| generate_subject(i, 4, 2, 16).unwrap()).collect();
        let val = vec![generate_subject(10, 4, 2, 16).unwrap()];
        for augment in [None, Some(AugmentConfig::default())] {
            let opts = TrainOptions { augment, iterations: 60, batch: 4, lr: 3e-3, val_every: 20, seed: 2 };
            let out = train_supervised(small_model(), &train, &val, &opts).unwrap();
            assert_eq!(out.log.len(), 60);
            let first: f64 = out.log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
            let last: f64 = out.log[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
            assert!(last < first, "loss {first} -> {last}");
            let best = out.log.iter().filter_map(|r| r.val_dice).fold(f64::MIN, f64::max);
            assert_eq!(out.checkpoint.val_dice, Some(best));
            assert!(out.checkpoint.model.task.has_running_stats());
        }
    }

    #[test]
    fn no_training_subjects_is_an_error() {
        assert!(train_supervised(small_model(), &[], &[], &TrainOptions::default()).is_err());
    }
}
