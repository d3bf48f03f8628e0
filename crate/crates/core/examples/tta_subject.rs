//! Adapts the normalization module to one shifted subject with each method and
//! prints the loss and Dice trajectories.

use foe_tta::nets::{evaluate_dice, train_supervised, Model, NormModuleConfig, TaskNetConfig, TrainOptions};
use foe_tta::pca::PcaConfig;
use foe_tta::prior::{build_prior_set, Estimator, PriorConfig};
use foe_tta::synth::{apply_shift, generate_subject, AugmentConfig, BiasField, ShiftParams};
use foe_tta::tta::{adapt_subject, entropy_min_adapt, TtaConfig, TtaMethod, TtaOptimizer};

fn main() -> foe_tta::Result<()> {
    let gen = |seed| generate_subject(seed, 4, 3, 32);
    let train = (0..8).map(|i| gen(100 + i)).collect::<Result<Vec<_>, _>>()?;
    let model = Model::new(NormModuleConfig::default(), TaskNetConfig { depth: 2, ..TaskNetConfig::default() }, 7)?;
    let opts = TrainOptions {
        augment: Some(AugmentConfig::default()),
        iterations: 300,
        val_every: 300,
        ..TrainOptions::default()
    };
    let out = train_supervised(model, &train, &train[..2], &opts)?;
    let (model, fp) = (out.checkpoint.model.clone(), out.checkpoint.fingerprint());

    let pca = PcaConfig { r: 4, d: 2, tau: 0.5, g: 4 };
    let prior = build_prior_set(
        &model,
        fp,
        &train,
        &PriorConfig { estimator: Estimator::Gaussian, pca: Some(pca), ..PriorConfig::default() },
    )?;
    let shift = ShiftParams {
        gamma: 2.0,
        bias_field: BiasField { amplitude: 0.3, n_bumps: 3 },
        noise_std: 0.02,
        brightness_offset: 0.0,
    };
    let subject = apply_shift(&gen(400)?, &shift)?;
    println!("before adaptation: Dice {:.4}", evaluate_dice(&model, std::slice::from_ref(&subject))?);

    for method in [TtaMethod::FoeCnn, TtaMethod::FoeCnnPca, TtaMethod::EntropyMin] {
        let cfg = TtaConfig { method, n_epochs: 30, lr: 1e-3, optimizer: TtaOptimizer::Adam, ..TtaConfig::default() };
        let out = match method {
            TtaMethod::EntropyMin => entropy_min_adapt(&model, &subject, &cfg)?,
            _ => adapt_subject(&model, &prior, fp, &subject, &cfg)?,
        };
        println!("{method}:");
        for r in out.trace.rows.iter().filter(|r| r.epoch % 10 == 0 || r.epoch == cfg.n_epochs) {
            println!("  epoch {:>3}  loss {:.5}  Dice {:.4}", r.epoch, r.loss_total, r.dice_mean);
        }
    }
    Ok(())
}
