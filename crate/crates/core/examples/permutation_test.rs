//! Paired sign-flip permutation tests: the exhaustive small case and a
//! Monte-Carlo case.

use foe_tta::bench::paired_permutation_test;

fn main() -> foe_tta::Result<()> {
    let p = paired_permutation_test(&[0.9, 0.8, 0.7], &[0.8, 0.7, 0.6], 10_000, 0)?;
    println!("three identical gains of 0.1: p = {p} (all 8 sign patterns enumerated)");

    let adapted: Vec<f64> = (0..20).map(|i| 0.85 + 0.01 * ((i * 7) % 5) as f64).collect();
    let baseline: Vec<f64> = (0..20).map(|i| 0.83 + 0.015 * ((i * 3) % 4) as f64).collect();
    for seed in 0..3 {
        let p = paired_permutation_test(&adapted, &baseline, 10_000, seed)?;
        println!("20 pairs, seed {seed}: p = {p:.4}");
    }
    Ok(())
}
