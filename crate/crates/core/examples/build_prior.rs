//! Builds Gaussian and KDE expert priors from a briefly trained network, saves
//! one, and compares the two estimators channel by channel.

use foe_tta::nets::{train_supervised, Model, NormModuleConfig, TaskNetConfig, TrainOptions};
use foe_tta::pca::PcaConfig;
use foe_tta::prior::{build_prior_set, kde_gaussian_divergence, load_prior, save_prior, Estimator, PriorConfig};
use foe_tta::synth::generate_subject;

fn main() -> foe_tta::Result<()> {
    let train = (0..4).map(|i| generate_subject(100 + i, 4, 3, 32)).collect::<Result<Vec<_>, _>>()?;
    let model = Model::new(NormModuleConfig::default(), TaskNetConfig { depth: 2, ..TaskNetConfig::default() }, 7)?;
    let out = train_supervised(
        model,
        &train,
        &train[..1],
        &TrainOptions { iterations: 150, val_every: 150, ..TrainOptions::default() },
    )?;
    let fp = out.checkpoint.fingerprint();
    let model = out.checkpoint.model;

    for estimator in [Estimator::Gaussian, Estimator::Kde] {
        let cfg =
            PriorConfig { estimator, pca: Some(PcaConfig { r: 4, d: 2, tau: 0.5, g: 4 }), ..PriorConfig::default() };
        let prior = build_prior_set(&model, fp, &train, &cfg)?;
        let s = &prior.subjects[0];
        println!(
            "{estimator:?}: {} subjects, {} feature experts and {} PCA experts each",
            prior.subjects.len(),
            s.cnn.len(),
            s.pca.len()
        );
        if estimator == Estimator::Gaussian {
            let path = std::env::temp_dir().join("example-prior.fpr");
            save_prior(&path, &prior)?;
            let back = load_prior(&path, Some(fp))?;
            println!("saved and reloaded {} ({} subjects)", path.display(), back.set.subjects.len());
        }
    }

    let kl = kde_gaussian_divergence(&model, &train[0], 256, 10_000)?;
    let mut values: Vec<f64> = kl.values().copied().collect();
    values.sort_by(f64::total_cmp);
    let close = values.iter().filter(|v| **v < 0.1).count();
    println!(
        "KL(KDE || Gaussian) over {} channels: median {:.4}, max {:.4}, {close} below 0.1",
        values.len(),
        values[values.len() / 2],
        values[values.len() - 1]
    );
    Ok(())
}
