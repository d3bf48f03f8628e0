//! Numerical self-checks shared by `selfcheck` and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::permutation::paired_permutation_test;
use crate::divergence::{
    check_factorized_kl_decomposition, check_subject_aggregation_identity, kl_gaussian, kl_grid, loss_foe_cnn_pca,
};
use crate::error::Result;
use crate::nets::{Model, NormModuleConfig, TaskNetConfig};
use crate::pca::{fit_pca, symmetric_eigen, PcaConfig};
use crate::prior::{build_prior_set, gaussian_grid, Estimator, PriorConfig, PriorSet};
use crate::synth::{apply_shift, generate_subject, BiasField, ShiftParams, Subject};
use crate::tta::{compute_test_stats, matching_loss_gradient, TtaConfig, TtaMethod};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    /// Passes when `value < tolerance`.
    pub fn below(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), value, tolerance, passed: value < tolerance, detail }
    }

    /// Passes when `value >= tolerance`.
    pub fn at_least(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), value, tolerance, passed: value >= tolerance, detail }
    }
}

/// Largest `|kl_grid - kl_gaussian|` over random Gaussian pairs on 1024-bin
/// grids spanning both densities to +-6 sigma. `kl_offset` is added to the
/// closed form so tests can inject a wrong constant.
pub fn kl_grid_vs_closed_form(n_pairs: usize, seed: u64, kl_offset: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_pairs {
        let (m1, s1): (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(0.2..3.0));
        let (m2, s2) = (rng.gen_range(-3.0..3.0), rng.gen_range(0.2..3.0));
        let lo = (m1 - 6.0 * s1).min(m2 - 6.0 * s2);
        let hi = (m1 + 6.0 * s1).max(m2 + 6.0 * s2);
        let p = gaussian_grid(m1, s1, lo, hi, 1024)?;
        let q = gaussian_grid(m2, s2, lo, hi, 1024)?;
        let closed = kl_gaussian(m1, s1, m2, s2)? + kl_offset;
        worst = worst.max((kl_grid(&p, &q)? - closed).abs());
    }
    Ok(CheckResult::below("kl_grid_vs_closed_form", worst, 1e-3, format!("max abs error over {n_pairs} pairs")))
}

/// Largest gap between the joint diagonal-Gaussian KL and the sum of 1D KLs.
pub fn factorized_kl(n_configs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_configs {
        let j = rng.gen_range(1..=5);
        let pairs: Vec<_> = (0..j)
            .map(|_| {
                (
                    (rng.gen_range(-3.0..3.0), rng.gen_range(0.2..3.0)),
                    (rng.gen_range(-3.0..3.0), rng.gen_range(0.2..3.0)),
                )
            })
            .collect();
        worst = worst.max(check_factorized_kl_decomposition(&pairs)?.gap);
    }
    Ok(CheckResult::below(
        "factorized_kl_decomposition",
        worst,
        1e-9,
        format!("max gap over {n_configs} configs, J <= 5"),
    ))
}

/// Subject-aggregation identity on random 2-4 component Gaussian mixtures.
/// Returns the identity check and the inequality check.
pub fn subject_aggregation(n_mixtures: usize, seed: u64) -> Result<(CheckResult, CheckResult)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi, n) = (-15.0, 15.0, 2048);
    let mut worst = 0.0f64;
    let mut violations = 0usize;
    for _ in 0..n_mixtures {
        let k = rng.gen_range(2..=4);
        let pdfs = (0..k)
            .map(|_| gaussian_grid(rng.gen_range(-3.0..3.0), rng.gen_range(0.3..2.0), lo, hi, n))
            .collect::<Result<Vec<_>>>()?;
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let p_t = gaussian_grid(rng.gen_range(-3.0..3.0), rng.gen_range(0.3..2.0), lo, hi, n)?;
        let c = check_subject_aggregation_identity(&pdfs, &weights, &p_t)?;
        worst = worst.max(c.gap);
        if c.lhs > c.expected_kl + 1e-12 {
            violations += 1;
        }
    }
    Ok((
        CheckResult::below("subject_aggregation_identity", worst, 1e-5, format!("max gap over {n_mixtures} mixtures")),
        CheckResult::below(
            "subject_aggregation_inequality",
            violations as f64,
            0.5,
            format!("mixtures with KL(mixture || p_t) > E_s KL(p_s || p_t), of {n_mixtures}"),
        ),
    ))
}

/// The toy model, data and prior of the gradient check.
pub struct ToyProblem {
    pub model: Model,
    pub prior: PriorSet,
    pub test: Subject,
    pub cfg: TtaConfig,
}

pub const TOY_FINGERPRINT: u64 = 0x70e;

/// `N_phi` with channels [4, 4, 1], a depth-2 `S_theta` and 16x16 inputs.
pub fn toy_problem(seed: u64) -> Result<ToyProblem> {
    let mut model = Model::new(
        NormModuleConfig { channels: vec![4, 4, 1], kernel: 3 },
        TaskNetConfig { depth: 2, base_channels: 4, n_classes: 2, ..TaskNetConfig::default() },
        seed,
    )?;
    for (i, bn) in model.task.bns.iter_mut().enumerate() {
        let c = bn.channels();
        bn.update_running(&vec![0.05 * i as f64; c], &vec![0.5 + 0.1 * i as f64; c]);
    }
    let train = (0..2).map(|i| generate_subject(seed * 10 + i, 2, 2, 16)).collect::<Result<Vec<_>>>()?;
    let shift = ShiftParams {
        gamma: 2.0,
        bias_field: BiasField { amplitude: 0.3, n_bumps: 3 },
        noise_std: 0.02,
        brightness_offset: 0.0,
    };
    let test = apply_shift(&generate_subject(seed * 10 + 7, 2, 2, 16)?, &shift)?;
    let pcfg = PriorConfig {
        estimator: Estimator::Gaussian,
        n_bins: 64,
        kde_max_samples: 300,
        pca: Some(PcaConfig { r: 4, d: 2, tau: 0.0, g: 3 }),
        batch: 2,
    };
    let prior = build_prior_set(&model, TOY_FINGERPRINT, &train, &pcfg)?;
    let cfg = TtaConfig { method: TtaMethod::FoeCnnPca, batch: 2, ..TtaConfig::default() };
    Ok(ToyProblem { model, prior, test, cfg })
}

/// Fraction of `phi` coordinates whose tape gradient of the full FoE-CNN-PCA
/// loss matches central finite differences to relative error 1e-4.
pub fn gradient_check(seed: u64) -> Result<CheckResult> {
    let toy = toy_problem(seed)?;
    let loss_at = |m: &Model| -> Result<f64> {
        let s = compute_test_stats(m, &toy.prior, &toy.test, &toy.cfg)?;
        Ok(loss_foe_cnn_pca(&toy.prior.subjects, &s.cnn, s.pca.as_ref(), toy.cfg.lambda)?.total)
    };
    let (_, grads) = matching_loss_gradient(&toy.model, &toy.prior, &toy.test, &toy.cfg)?;
    // Steps much above 1e-6 straddle ReLU kinks of the task network.
    let h = 1e-6;
    let (mut within, mut total) = (0usize, 0usize);
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let mut plus = toy.model.clone();
            plus.norm.params_mut()[pi].data_mut()[j] += h;
            let mut minus = toy.model.clone();
            minus.norm.params_mut()[pi].data_mut()[j] -= h;
            let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
            let ad = g.data()[j];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-12);
            total += 1;
            within += usize::from(rel < 1e-4);
        }
    }
    Ok(CheckResult::at_least(
        "gradient_vs_finite_differences",
        within as f64 / total as f64,
        0.95,
        format!("{within}/{total} coordinates within relative error 1e-4"),
    ))
}

/// Symmetric-eigensolver residuals and the full-rank reconstruction identity on
/// random patch sets.
pub fn pca_residuals(n_sets: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_sets {
        let r = rng.gen_range(2..=4);
        let dim = r * r;
        let n = rng.gen_range(dim + 2..3 * dim);
        let patches: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = patches.iter().map(|p| p.as_slice()).collect();
        let basis = fit_pca(&refs, dim)?;
        for p in &patches {
            let back = basis.reconstruct(&basis.project(p)?);
            worst = worst.max(back.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        let a: Vec<f64> = (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sym: Vec<f64> = (0..dim * dim).map(|k| 0.5 * (a[k] + a[(k % dim) * dim + k / dim])).collect();
        let eig = symmetric_eigen(&sym, dim)?;
        for (lambda, v) in eig.values.iter().zip(&eig.vectors) {
            for i in 0..dim {
                let av: f64 = (0..dim).map(|j| sym[i * dim + j] * v[j]).sum();
                worst = worst.max((av - lambda * v[i]).abs());
            }
        }
        for (i, u) in eig.vectors.iter().enumerate() {
            for (j, v) in eig.vectors.iter().enumerate() {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    Ok(CheckResult::below("pca_eigen_residuals", worst, 1e-8, format!("max residual over {n_sets} random sets")))
}

/// Loss of a subject's own features against a prior built from it alone.
pub fn prior_self_match(seed: u64) -> Result<CheckResult> {
    let toy = toy_problem(seed)?;
    let subject = generate_subject(seed * 10, 2, 2, 16)?;
    let pcfg = PriorConfig {
        estimator: Estimator::Gaussian,
        n_bins: 64,
        kde_max_samples: 300,
        pca: Some(PcaConfig { r: 4, d: 2, tau: 0.0, g: 3 }),
        batch: 2,
    };
    let prior = build_prior_set(&toy.model, TOY_FINGERPRINT, std::slice::from_ref(&subject), &pcfg)?;
    let stats = compute_test_stats(&toy.model, &prior, &subject, &toy.cfg)?;
    let loss = loss_foe_cnn_pca(&prior.subjects, &stats.cnn, stats.pca.as_ref(), 0.1)?.total;
    Ok(CheckResult::below("prior_self_match", loss, 1e-8, "FoE-CNN-PCA loss of a subject against its own prior".into()))
}

pub fn permutation_exhaustive() -> Result<CheckResult> {
    let p = paired_permutation_test(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], 10_000, 0)?;
    Ok(CheckResult::below(
        "permutation_exhaustive",
        (p - 0.25).abs(),
        1e-15,
        format!("p = {p} for differences {{1, 1, 1}}, expected 0.25"),
    ))
}
