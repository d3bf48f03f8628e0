//! Fits a patch basis on last-layer features of an untrained network and shows
//! how the loadings spread across components.

use foe_tta::nets::{ForwardOptions, Model, NormModuleConfig, TaskNetConfig};
use foe_tta::pca::{fit_pca, PcaConfig};
use foe_tta::prior::{active_patches, moments};
use foe_tta::synth::generate_subject;
use foe_tta::tensor::Tape;

fn main() -> foe_tta::Result<()> {
    let subject = generate_subject(3, 4, 3, 32)?;
    let model = Model::new(NormModuleConfig::default(), TaskNetConfig { depth: 2, ..TaskNetConfig::default() }, 1)?;
    let mut tape = Tape::new();
    let out = model.forward_with_taps(&mut tape, &subject.slices, ForwardOptions::train())?;
    let last = tape.value(*out.taps.last().unwrap()).clone();
    let probs = tape.value(out.probs).clone();

    // With an untrained network nothing is confidently foreground, so keep all patches.
    let cfg = PcaConfig { r: 8, d: 4, tau: 0.0, g: 6 };
    let per_channel = active_patches(&last, &probs, &cfg)?;
    let patches: Vec<&[f64]> = per_channel[0].iter().map(|p| p.as_slice()).collect();
    let basis = fit_pca(&patches, cfg.g)?;
    println!("channel 0: {} patches of {} values", patches.len(), cfg.dim());
    let total: f64 = basis.eigenvalues.iter().sum();
    for (g, ev) in basis.eigenvalues.iter().enumerate() {
        let loadings: Vec<f64> = patches.iter().map(|p| basis.project(p).map(|v| v[g])).collect::<Result<_, _>>()?;
        let m = moments(&loadings)?;
        println!(
            "component {g}: eigenvalue {ev:.5} ({:.1}% of kept), loading mean {:+.2e} std {:.4}",
            100.0 * ev / total,
            m.mean,
            m.std()
        );
    }
    Ok(())
}
