//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 9 are experimental outcomes on synthetic data: the test
//! requires their pipeline to run to completion and prints whether the
//! thresholds were met, but a missed threshold does not fail the suite. Every
//! other criterion is a correctness property and is asserted.
//!
//! Criteria 7 to 9 run the full pipeline on `configs/acceptance.cfg` into
//! `runs/acceptance` at the workspace root (override with
//! `FOE_TTA_ACCEPTANCE_DIR`). Stages resume from their stamps, so only the first
//! run pays for training and adaptation; recorded stage times still count
//! towards the runtime limits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use foe_tta::bench::checks::{self, toy_problem};
use foe_tta::bench::{
    artifact_seconds, cmd_build_prior, cmd_evaluate, cmd_make_data, cmd_train, cmd_tta, paired_permutation_test,
    plan_subjects, read_metrics, render_manifest, subject_dice, Layout, MetricsRow, RunConfig,
};
use foe_tta::divergence::{loss_foe_cnn, loss_foe_cnn_pca};
use foe_tta::nets::{train_supervised, Model, NormModuleConfig, TaskNetConfig, TrainOptions};
use foe_tta::pca::{fit_pca, PcaConfig};
use foe_tta::prior::{build_prior_set, Estimator, PriorConfig};
use foe_tta::synth::{apply_shift, generate_subject, BiasField, ShiftParams};
use foe_tta::tta::{adapt_subject, compute_test_stats, TtaConfig};
use rand::{Rng, SeedableRng};

struct Verdict {
    passed: bool,
    /// False when the check could not be carried out at all.
    completed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, completed: true, detail: detail.into() }
}

fn broken(detail: impl Into<String>) -> Verdict {
    Verdict { passed: false, completed: false, detail: detail.into() }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn timed(limit_s: f64, f: impl FnOnce() -> foe_tta::Result<Verdict>) -> Verdict {
    let t = Instant::now();
    let v = match f() {
        Ok(v) => v,
        Err(e) => return broken(format!("error: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    verdict(v.passed && secs < limit_s, format!("{}; {secs:.2}s (limit {limit_s}s)", v.detail))
}

fn criterion_1() -> Verdict {
    timed(5.0, || {
        let c = checks::kl_grid_vs_closed_form(100, 11, 0.0)?;
        Ok(verdict(c.passed, format!("max |grid - closed| {:.2e} over 100 pairs", c.value)))
    })
}

fn criterion_2() -> Verdict {
    timed(1.0, || {
        let c = checks::factorized_kl(50, 12)?;
        Ok(verdict(c.value < 1e-9, format!("max gap {:.2e} over 50 configurations", c.value)))
    })
}

fn criterion_3() -> Verdict {
    timed(10.0, || {
        let (identity, inequality) = checks::subject_aggregation(50, 13)?;
        Ok(verdict(
            identity.value < 1e-5 && inequality.passed,
            format!(
                "max identity gap {:.2e}, {} inequality violations over 50 mixtures",
                identity.value, inequality.value
            ),
        ))
    })
}

fn criterion_4() -> Verdict {
    timed(120.0, || {
        let c = checks::gradient_check(14)?;
        Ok(verdict(c.value >= 0.95, c.detail))
    })
}

fn criterion_5() -> Verdict {
    timed(30.0, || {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let (mut eig_err, mut vec_err, mut rec_err) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..20 {
            let r = rng.gen_range(2..=4);
            let dim = r * r;
            let n = rng.gen_range(dim + 2..3 * dim);
            let patches: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let refs: Vec<&[f64]> = patches.iter().map(|p| p.as_slice()).collect();
            let basis = fit_pca(&refs, dim)?;

            let x = nalgebra::DMatrix::from_fn(n, dim, |i, j| patches[i][j]);
            let mean = x.row_mean();
            let centered = nalgebra::DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
            let cov = centered.transpose() * &centered / n as f64;
            let oracle = nalgebra::SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| oracle.eigenvalues[b].total_cmp(&oracle.eigenvalues[a]));
            for (k, &o) in order.iter().enumerate() {
                eig_err = eig_err.max((basis.eigenvalues[k] - oracle.eigenvalues[o].max(0.0)).abs());
                let v = oracle.eigenvectors.column(o);
                let c = &basis.components[k];
                let same = (0..dim).map(|i| (c[i] - v[i]).abs()).fold(0.0, f64::max);
                let flipped = (0..dim).map(|i| (c[i] + v[i]).abs()).fold(0.0, f64::max);
                vec_err = vec_err.max(same.min(flipped));
            }
            for p in &patches {
                let back = basis.reconstruct(&basis.project(p)?);
                rec_err = rec_err.max(back.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
        }
        Ok(verdict(
            eig_err < 1e-8 && vec_err < 1e-8 && rec_err < 1e-8,
            format!(
                "eigenvalue error {eig_err:.1e}, component error {vec_err:.1e}, reconstruction error {rec_err:.1e}"
            ),
        ))
    })
}

fn criterion_6() -> Verdict {
    timed(60.0, || {
        // A briefly trained model, so that the Dice being compared is not trivially zero.
        let train = (0..3).map(|i| generate_subject(600 + i, 4, 3, 32)).collect::<foe_tta::Result<Vec<_>>>()?;
        let model = Model::new(NormModuleConfig::default(), TaskNetConfig { depth: 2, ..TaskNetConfig::default() }, 6)?;
        let opts = TrainOptions { iterations: 150, val_every: 150, ..TrainOptions::default() };
        let ckpt = train_supervised(model, &train, &train[..1], &opts)?.checkpoint;
        let (model, fp) = (ckpt.model.clone(), ckpt.fingerprint());

        let pcfg = PriorConfig { pca: Some(PcaConfig { r: 4, d: 2, tau: 0.5, g: 4 }), ..PriorConfig::default() };
        let own = build_prior_set(&model, fp, &train[..1], &pcfg)?;
        let cfg = TtaConfig { n_epochs: 0, ..TtaConfig::default() };
        let stats = compute_test_stats(&model, &own, &train[0], &cfg)?;
        let self_loss = loss_foe_cnn_pca(&own.subjects, &stats.cnn, stats.pca.as_ref(), cfg.lambda)?.total;

        let prior = build_prior_set(&model, fp, &train, &pcfg)?;
        let shift = ShiftParams {
            gamma: 2.0,
            bias_field: BiasField { amplitude: 0.3, n_bumps: 3 },
            noise_std: 0.02,
            brightness_offset: 0.0,
        };
        let test = apply_shift(&generate_subject(700, 4, 3, 32)?, &shift)?;
        let out = adapt_subject(&model, &prior, fp, &test, &cfg)?;
        let before = subject_dice(&model, &test)?.0;
        let epoch0 = out.trace.first().map(|r| r.dice_mean).unwrap_or(f64::NAN);
        Ok(verdict(
            self_loss < 1e-8 && epoch0 == before && out.model == model,
            format!("self-match loss {self_loss:.1e}; epoch-0 Dice {epoch0:.6} vs unadapted {before:.6}"),
        ))
    })
}

fn criterion_10() -> Verdict {
    timed(1.0, || {
        let p = paired_permutation_test(&[0.9, 0.8, 0.7], &[0.8, 0.7, 0.6], 10_000, 0)?;
        let c = checks::permutation_exhaustive()?;
        Ok(verdict(p == 0.25 && c.passed, format!("p = {p} for three identical positive differences")))
    })
}

const MAIN_RUN: &str = "foe_cnn_pca-gaussian-l0.1";
const LAMBDA0_RUN: &str = "foe_cnn_pca-gaussian-l0";
const KDE_RUN: &str = "foe_cnn_pca-kde-l0.1";

struct Pipeline {
    cfg: RunConfig,
    eval: Vec<MetricsRow>,
}

impl Pipeline {
    fn layout(&self) -> Layout {
        Layout::new(&self.cfg.out_dir)
    }

    /// Final per-subject Dice of one evaluated run on one domain.
    fn dice(&self, run_id: &str, domain: u32) -> BTreeMap<String, f64> {
        self.eval
            .iter()
            .filter(|r| r.run_id == run_id && r.domain == domain)
            .map(|r| (r.subject_id.clone(), r.dice_mean))
            .collect()
    }

    fn trace(&self, run_id: &str) -> foe_tta::Result<Vec<MetricsRow>> {
        read_metrics(&self.layout().metrics().join(format!("tta-{run_id}.csv")))
    }

    /// Sequential adaptation time of a run: the sum of per-subject wall clocks.
    fn tta_seconds(&self, run_id: &str) -> foe_tta::Result<f64> {
        let mut last: BTreeMap<String, u128> = BTreeMap::new();
        for r in self.trace(run_id)? {
            let e = last.entry(r.subject_id).or_default();
            *e = (*e).max(r.wall_ms);
        }
        Ok(last.values().sum::<u128>() as f64 / 1000.0)
    }
}

fn run_pipeline() -> foe_tta::Result<Pipeline> {
    let root = workspace();
    let out =
        std::env::var_os("FOE_TTA_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| root.join("runs/acceptance"));
    let cfg = RunConfig::load(&root.join("configs/acceptance.cfg"))?.with_overrides(None, Some(out))?;
    let layout = Layout::new(&cfg.out_dir);
    let planned = render_manifest(&plan_subjects(&cfg));
    if std::fs::read_to_string(layout.manifest()).ok().as_deref() != Some(planned.as_str()) {
        cmd_make_data(&cfg, true)?;
    }
    cmd_train(&cfg, false)?;
    cmd_build_prior(&cfg, false)?;
    cmd_tta(&cfg, false)?;
    cmd_evaluate(&cfg)?;
    let eval = read_metrics(&layout.metrics().join("eval.csv"))?;
    Ok(Pipeline { cfg, eval })
}

fn pipeline() -> Result<&'static Pipeline, String> {
    static P: OnceLock<Result<Pipeline, String>> = OnceLock::new();
    P.get_or_init(|| run_pipeline().map_err(|e| e.to_string())).as_ref().map_err(Clone::clone)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn criterion_7() -> Verdict {
    let p = match pipeline() {
        Ok(p) => p,
        Err(e) => return broken(format!("pipeline error: {e}")),
    };
    let run = || -> foe_tta::Result<Verdict> {
        let layout = p.layout();
        let strong_src = mean(p.dice("baseline-strong", 0).into_values());
        let plain_src = mean(p.dice("baseline-plain", 0).into_values());
        let plain_shift = mean(p.dice("baseline-plain", 1).into_values());
        let a = strong_src >= 0.90;
        let b = plain_src - plain_shift >= 0.10;

        let before = p.dice("baseline-strong", 1);
        let after = p.dice(MAIN_RUN, 1);
        if after.len() != 5 || p.dice(MAIN_RUN, 0).is_empty() {
            return Ok(broken(format!("{MAIN_RUN} was evaluated on {} of 5 shifted subjects", after.len())));
        }
        let gains: Vec<f64> = after.iter().map(|(id, d)| d - before[id]).collect();
        let improved = gains.iter().filter(|g| **g >= 0.05).count();
        let c = gains.len() == 5 && improved >= 4;

        let src_before = p.dice("baseline-strong", 0);
        let src_changes: Vec<f64> = p.dice(MAIN_RUN, 0).iter().map(|(id, d)| d - src_before[id]).collect();
        let worst_src = src_changes.iter().copied().fold(f64::INFINITY, f64::min);
        let d = !src_changes.is_empty() && worst_src >= -0.02;

        let train_s: f64 = ["plain", "strong"]
            .iter()
            .map(|n| {
                let ckpt = layout.checkpoint(n);
                artifact_seconds(&ckpt).or_else(|| last_train_seconds(&layout.models().join(format!("train-{n}.csv"))))
            })
            .sum::<Option<f64>>()
            .unwrap_or(f64::NAN);
        let prior_s = artifact_seconds(&layout.prior(Estimator::Gaussian)).unwrap_or(f64::NAN);
        let total = train_s + prior_s + p.tta_seconds(MAIN_RUN)?;
        let within = total < 30.0 * 60.0;

        let gain_list: Vec<String> = gains.iter().map(|g| format!("{g:+.3}")).collect();
        Ok(verdict(
            a && b && c && d && within,
            format!(
                "(a) strong source {strong_src:.4} {}; (b) plain source {plain_src:.4} shifted {plain_shift:.4} {}; \
                 (c) gains [{}], {improved}/5 >= 0.05 {}; (d) worst source change {worst_src:+.4} {}; \
                 runtime {total:.0}s {}",
                ok(a),
                ok(b),
                gain_list.join(" "),
                ok(c),
                ok(d),
                ok(within)
            ),
        ))
    };
    run().unwrap_or_else(|e| broken(format!("error: {e}")))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "MISSED"
    }
}

fn last_train_seconds(csv: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(csv).ok()?;
    text.lines().last()?.rsplit(',').next()?.parse::<f64>().ok().map(|ms| ms / 1000.0)
}

fn criterion_8() -> Verdict {
    let p = match pipeline() {
        Ok(p) => p,
        Err(e) => return broken(format!("pipeline error: {e}")),
    };
    let run = || -> foe_tta::Result<Verdict> {
        let with = mean(p.dice(MAIN_RUN, 1).into_values());
        let without = mean(p.dice(LAMBDA0_RUN, 1).into_values());
        let reported = with.is_finite() && without.is_finite();

        // Zero weight must leave exactly the feature term, bit for bit.
        let trace = p.trace(LAMBDA0_RUN)?;
        let trace_bitwise =
            !trace.is_empty() && trace.iter().all(|r| r.loss_total.map(f64::to_bits) == r.loss_cnn.map(f64::to_bits));
        let toy = toy_problem(18)?;
        let stats = compute_test_stats(&toy.model, &toy.prior, &toy.test, &toy.cfg)?;
        let cnn = loss_foe_cnn(&toy.prior.subjects, &stats.cnn)?;
        let zero = loss_foe_cnn_pca(&toy.prior.subjects, &stats.cnn, stats.pca.as_ref(), 0.0)?.total;
        let direct_bitwise = cnn.total.to_bits() == zero.to_bits();
        Ok(verdict(
            reported && trace_bitwise && direct_bitwise,
            format!(
                "shifted Dice lambda 0.1: {with:.4}, lambda 0: {without:.4}; lambda 0 equals the feature-only loss bitwise: {}",
                trace_bitwise && direct_bitwise
            ),
        ))
    };
    run().unwrap_or_else(|e| broken(format!("error: {e}")))
}

fn criterion_9() -> Verdict {
    let p = match pipeline() {
        Ok(p) => p,
        Err(e) => return broken(format!("pipeline error: {e}")),
    };
    let run = || -> foe_tta::Result<Verdict> {
        let layout = p.layout();
        let kde_dice = p.dice(KDE_RUN, 1);
        let completed = kde_dice.len() == 5 && kde_dice.values().all(|d| d.is_finite());
        let before = p.dice("baseline-strong", 1);
        let kde_gain = mean(kde_dice.iter().map(|(id, d)| d - before[id]));

        let csv = std::fs::read_to_string(layout.kde_comparison())?;
        let kls: Vec<f64> = csv.lines().skip(1).filter_map(|l| l.rsplit(',').next()?.parse().ok()).collect();
        let close = kls.iter().filter(|k| **k < 0.1).count();
        let frac = close as f64 / kls.len().max(1) as f64;

        let secs = artifact_seconds(&layout.prior(Estimator::Kde)).unwrap_or(f64::NAN)
            + artifact_seconds(&layout.kde_comparison()).unwrap_or(f64::NAN)
            + p.tta_seconds(KDE_RUN)?;
        if !completed {
            return Ok(broken(format!("KDE run finished on {} of 5 shifted subjects", kde_dice.len())));
        }
        Ok(verdict(
            frac >= 0.9 && secs < 45.0 * 60.0,
            format!(
                "KDE run on {} shifted subjects, mean gain {kde_gain:+.4}; {close}/{} channels with KL(KDE || Gaussian) < 0.1 ({:.1}%); runtime {secs:.0}s",
                kde_dice.len(),
                kls.len(),
                100.0 * frac
            ),
        ))
    };
    run().unwrap_or_else(|e| broken(format!("error: {e}")))
}

fn main() {
    const REPORTED_ONLY: [u8; 2] = [7, 9];
    let criteria: [(u8, fn() -> Verdict); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut failed = Vec::new();
    for (n, f) in criteria {
        let v = f();
        println!("criterion {n:>2}: {} {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        if !v.completed || (!v.passed && !REPORTED_ONLY.contains(&n)) {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
