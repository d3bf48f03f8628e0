//! Generates a phantom subject, shifts it like a different scanner, applies the
//! stacked augmentation, and writes PNGs of each.

use foe_tta::synth::{apply_shift, augment_batch, export_png, generate_subject, AugmentConfig, BiasField, ShiftParams};
use rand::SeedableRng;

fn main() -> foe_tta::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-synthetic".into());
    let subject = generate_subject(42, 4, 3, 64)?;
    let shift = ShiftParams {
        gamma: 2.0,
        bias_field: BiasField { amplitude: 0.3, n_bumps: 3 },
        noise_std: 0.02,
        brightness_offset: 0.0,
    };
    let shifted = apply_shift(&subject, &shift)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let cfg = AugmentConfig { p: 0.5, ..AugmentConfig::default() };
    let (images, labels) = augment_batch(&subject.slices, &subject.labels, &cfg, &mut rng)?;
    let mut augmented = subject.clone();
    augmented.slices = images;
    augmented.labels = labels;

    let dir = std::path::Path::new(&out);
    for (stem, s) in [("source", &subject), ("shifted", &shifted), ("augmented", &augmented)] {
        let files = export_png(dir, stem, s)?;
        let mean = s.slices.data().iter().sum::<f64>() / s.slices.numel() as f64;
        println!("{stem:<10} mean intensity {mean:.3}, {} files", files.len());
    }
    let fg = subject.labels.iter().filter(|l| **l > 0).count();
    println!("foreground fraction {:.3}; images in {}", fg as f64 / subject.labels.len() as f64, dir.display());
    Ok(())
}
