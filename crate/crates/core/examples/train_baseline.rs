//! Trains a plain and an augmented baseline on small phantoms and compares
//! them on source and shifted test subjects.

use foe_tta::nets::{
    evaluate_dice, save_checkpoint, train_supervised, Model, NormModuleConfig, TaskNetConfig, TrainOptions,
};
use foe_tta::synth::{apply_shift, generate_subject, AugmentConfig, BiasField, ShiftParams};

fn main() -> foe_tta::Result<()> {
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let gen = |seed| generate_subject(seed, 4, 3, 32);
    let train = (0..8).map(|i| gen(100 + i)).collect::<Result<Vec<_>, _>>()?;
    let val = (0..2).map(|i| gen(200 + i)).collect::<Result<Vec<_>, _>>()?;
    let test = (0..3).map(|i| gen(300 + i)).collect::<Result<Vec<_>, _>>()?;
    let shift = ShiftParams {
        gamma: 2.0,
        bias_field: BiasField { amplitude: 0.3, n_bumps: 3 },
        noise_std: 0.02,
        brightness_offset: 0.0,
    };
    let shifted = test.iter().map(|s| apply_shift(s, &shift)).collect::<Result<Vec<_>, _>>()?;

    let out_dir = std::path::Path::new("target/example-train");
    std::fs::create_dir_all(out_dir)?;
    for (name, augment) in [("plain", None), ("strong", Some(AugmentConfig::default()))] {
        let model = Model::new(NormModuleConfig::default(), TaskNetConfig { depth: 2, ..TaskNetConfig::default() }, 7)?;
        let opts = TrainOptions { augment, iterations, val_every: iterations / 5, ..TrainOptions::default() };
        let out = train_supervised(model, &train, &val, &opts)?;
        let curve: Vec<String> =
            out.log.iter().filter_map(|r| r.val_dice.map(|d| format!("{}:{d:.3}", r.iteration))).collect();
        println!("{name:<6} validation {}", curve.join(" "));
        let m = &out.checkpoint.model;
        println!(
            "{name:<6} source Dice {:.4}, shifted Dice {:.4}",
            evaluate_dice(m, &test)?,
            evaluate_dice(m, &shifted)?
        );
        let fp = save_checkpoint(&out_dir.join(format!("{name}.ckpt")), &out.checkpoint)?;
        println!("{name:<6} fingerprint {fp:016x}");
    }
    Ok(())
}
