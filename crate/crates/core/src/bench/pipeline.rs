//! The command stages. Each reads its inputs from and writes its outputs under
//! the run directory:
//!
//! ```text
//! <out>/config.txt                      resolved config of the last command
//! <out>/data/manifest.tsv               id, split, domain, seed, file
//! <out>/data/subjects/<id>.fsub
//! <out>/models/{plain,strong}.ckpt      plus train-<name>.csv logs
//! <out>/priors/prior-<estimator>.fpr    plus kde-vs-gaussian.csv
//! <out>/tta/<run>/<subject>.{ftd,csv}   adapted phi deltas and traces
//! <out>/metrics/*.csv
//! ```
//!
//! Stages skip work whose `.stamp` file matches the current inputs, unless
//! `force` is set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::metrics::{read_metrics, write_metrics, MetricsRow};
use super::permutation::paired_permutation_test;
use crate::error::{Error, Result};
use crate::nets::{
    dice_scores, load_checkpoint, load_phi_delta, predict_labels, save_checkpoint, save_phi_delta, train_supervised,
    Model, PhiDelta,
};
use crate::prior::{build_prior_set, kde_gaussian_divergence, load_prior, save_prior, Estimator, PriorSet};
use crate::synth::{apply_shift, export_png, generate_subject, load_subject, save_subject, Subject};
use crate::tta::{adapt_subject, TtaConfig, TtaMethod};

pub const MANIFEST_VERSION_LINE: &str = "# foe-tta-manifest v1";

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.tsv")
    }
    pub fn subject(&self, id: &str) -> PathBuf {
        self.data().join("subjects").join(format!("{id}.fsub"))
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.models().join(format!("{name}.ckpt"))
    }
    pub fn priors(&self) -> PathBuf {
        self.root.join("priors")
    }
    pub fn prior(&self, estimator: Estimator) -> PathBuf {
        self.priors().join(format!("prior-{estimator}.fpr"))
    }
    pub fn kde_comparison(&self) -> PathBuf {
        self.priors().join("kde-vs-gaussian.csv")
    }
    pub fn tta_run(&self, run_id: &str) -> PathBuf {
        self.root.join("tta").join(run_id)
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub domain: u32,
    pub seed: u64,
}

fn stamp_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn stamp_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".stamp");
    artifact.with_file_name(name)
}

fn up_to_date(artifact: &Path, key: &str) -> bool {
    artifact.exists() && fs::read_to_string(stamp_path(artifact)).is_ok_and(|s| s.trim() == key)
}

fn write_stamp(artifact: &Path, key: &str) -> Result<()> {
    fs::write(stamp_path(artifact), format!("{key}\n"))?;
    Ok(())
}

fn secs_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".secs");
    artifact.with_file_name(name)
}

/// Wall-clock seconds spent producing an artifact, kept next to it so a
/// resumed run can still account for the original cost.
pub fn artifact_seconds(artifact: &Path) -> Option<f64> {
    fs::read_to_string(secs_path(artifact)).ok()?.trim().parse().ok()
}

fn write_seconds(artifact: &Path, secs: f64) -> Result<()> {
    fs::write(secs_path(artifact), format!("{secs}\n"))?;
    Ok(())
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.render())?;
    Ok(())
}

/// The subjects a config generates, in manifest order.
pub fn plan_subjects(cfg: &RunConfig) -> Vec<ManifestEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut push = |id: String, split: Split, domain: u32| {
        out.push(ManifestEntry { id, split, domain, seed: rng.gen() });
    };
    for i in 0..cfg.n_train {
        push(format!("train-{i:02}"), Split::Train, 0);
    }
    for i in 0..cfg.n_val {
        push(format!("val-{i:02}"), Split::Val, 0);
    }
    for i in 0..cfg.n_test {
        push(format!("test-d0-{i:02}"), Split::Test, 0);
    }
    for d in 1..=cfg.n_domains as u32 {
        for i in 0..cfg.n_test_shifted {
            push(format!("test-d{d}-{i:02}"), Split::Test, d);
        }
    }
    out
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = format!("{MANIFEST_VERSION_LINE}\nid\tsplit\tdomain\tseed\tfile\n");
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\tsubjects/{}.fsub", e.id, e.split.as_str(), e.domain, e.seed, e.id);
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::InvalidState(format!("cannot read manifest {}: {e}; run make-data first", path.display()))
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_VERSION_LINE) {
        return Err(Error::format("manifest version line missing"));
    }
    lines.next();
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::format(format!("manifest row '{l}'")));
            }
            let split = match f[1] {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                s => return Err(Error::format(format!("unknown split '{s}'"))),
            };
            let bad = |_| Error::format(format!("manifest row '{l}'"));
            Ok(ManifestEntry {
                id: f[0].to_string(),
                split,
                domain: f[2].parse().map_err(bad)?,
                seed: f[3].parse().map_err(bad)?,
            })
        })
        .collect()
}

/// Generates one manifest entry. Shifted subjects are generated in the source
/// domain and then shifted.
pub fn realize_subject(cfg: &RunConfig, e: &ManifestEntry) -> Result<Subject> {
    let mut s = generate_subject(e.seed, cfg.n_slices, cfg.n_classes, cfg.image_size)?;
    if e.domain > 0 {
        let shift = &cfg.domains[e.domain as usize - 1];
        s = apply_shift(&s, &shift.params())?;
        s.domain_id = e.domain;
    }
    s.id = e.id.clone();
    Ok(s)
}

pub fn cmd_make_data(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let layout = Layout::new(&cfg.out_dir);
    let data = layout.data();
    if data.exists() && fs::read_dir(&data)?.next().is_some() {
        if !force {
            return Err(Error::InvalidState(format!("{} is not empty; pass --force to overwrite", data.display())));
        }
        fs::remove_dir_all(&data)?;
    }
    fs::create_dir_all(data.join("subjects"))?;
    write_config(cfg)?;
    let entries = plan_subjects(cfg);
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let s = realize_subject(cfg, e)?;
        save_subject(&layout.subject(&e.id), &s)?;
        if cfg.export_png {
            export_png(&data.join("png"), &e.id, &s)?;
        }
        Ok(())
    })?;
    fs::write(layout.manifest(), render_manifest(&entries))?;
    info!("wrote {} subjects to {}", entries.len(), data.display());
    Ok(data)
}

/// Loaded subjects grouped by split, in manifest order.
pub struct Dataset {
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
    /// Hash of the manifest text.
    pub key: String,
}

pub fn load_dataset(layout: &Layout) -> Result<Dataset> {
    let entries = read_manifest(&layout.manifest())?;
    let key = stamp_key(&[&fs::read_to_string(layout.manifest())?]);
    let subjects: Vec<(Split, Subject)> = entries
        .par_iter()
        .map(|e| {
            let mut s = load_subject(&layout.subject(&e.id))?;
            s.id = e.id.clone();
            s.domain_id = e.domain;
            Ok((e.split, s))
        })
        .collect::<Result<_>>()?;
    let mut ds = Dataset { train: Vec::new(), val: Vec::new(), test: Vec::new(), key };
    for (split, s) in subjects {
        match split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}

pub const BASELINES: [&str; 2] = ["plain", "strong"];

pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let ds = load_dataset(&layout)?;
    fs::create_dir_all(layout.models())?;
    write_config(cfg)?;
    for name in BASELINES {
        let strong = name == "strong";
        let opts = cfg.train_options(strong);
        let path = layout.checkpoint(name);
        let key = stamp_key(&[&ds.key, &format!("{:?}{:?}{:?}", cfg.norm_config(), cfg.task_config(), opts)]);
        if !force && up_to_date(&path, &key) {
            info!("{name} baseline is up to date");
            continue;
        }
        let t = Instant::now();
        let model = Model::new(cfg.norm_config(), cfg.task_config(), cfg.seed)?;
        let out = train_supervised(model, &ds.train, &ds.val, &opts)?;
        let fp = save_checkpoint(&path, &out.checkpoint)?;
        let mut log = String::from("iteration,loss,val_dice,elapsed_ms\n");
        for r in &out.log {
            let val = r.val_dice.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(log, "{},{},{},{}", r.iteration, r.loss, val, r.elapsed_ms);
        }
        fs::write(layout.models().join(format!("train-{name}.csv")), log)?;
        write_stamp(&path, &key)?;
        write_seconds(&path, t.elapsed().as_secs_f64())?;
        info!(
            "{name} baseline: best val Dice {:.4} at iteration {}, fingerprint {fp:016x}, {:.0}s",
            out.checkpoint.val_dice.unwrap_or(f64::NAN),
            out.checkpoint.iteration,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn load_strong(layout: &Layout) -> Result<(Model, u64)> {
    let path = layout.checkpoint("strong");
    let (ckpt, fp) = load_checkpoint(&path)
        .map_err(|e| Error::InvalidState(format!("cannot load {}: {e}; run train first", path.display())))?;
    Ok((ckpt.model, fp))
}

/// Loads a prior and fails if it was built from a different checkpoint.
pub fn load_matching_prior(path: &Path, fingerprint: u64) -> Result<PriorSet> {
    let loaded = load_prior(path, Some(fingerprint))
        .map_err(|e| Error::InvalidState(format!("cannot load {}: {e}; run build-prior first", path.display())))?;
    if loaded.fingerprint_mismatch {
        return Err(Error::Fingerprint { expected: fingerprint, found: loaded.set.model_fingerprint });
    }
    Ok(loaded.set)
}

pub fn cmd_build_prior(cfg: &RunConfig, force: bool) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let ds = load_dataset(&layout)?;
    let (model, fp) = load_strong(&layout)?;
    fs::create_dir_all(layout.priors())?;
    write_config(cfg)?;
    for &est in &cfg.tta_estimators {
        let pcfg = cfg.prior_config(est);
        let path = layout.prior(est);
        let key = stamp_key(&[&ds.key, &format!("{fp:016x}{pcfg:?}")]);
        if !force && up_to_date(&path, &key) {
            info!("{est} prior is up to date");
            continue;
        }
        let t = Instant::now();
        let set = build_prior_set(&model, fp, &ds.train, &pcfg)?;
        save_prior(&path, &set)?;
        write_stamp(&path, &key)?;
        write_seconds(&path, t.elapsed().as_secs_f64())?;
        info!("{est} prior for {} subjects in {:.0}s", set.subjects.len(), t.elapsed().as_secs_f64());
    }
    if cfg.tta_estimators.contains(&Estimator::Kde) {
        let path = layout.kde_comparison();
        let key = stamp_key(&[&ds.key, &format!("{fp:016x}{}{}", cfg.prior_bins, cfg.kde_max_samples)]);
        if force || !up_to_date(&path, &key) {
            let t = Instant::now();
            let per_subject: Vec<BTreeMap<_, f64>> = ds
                .train
                .par_iter()
                .map(|s| kde_gaussian_divergence(&model, s, cfg.prior_bins, cfg.kde_max_samples))
                .collect::<Result<_>>()?;
            let mut csv = String::from("subject_id,layer,channel,kl_kde_vs_gaussian\n");
            for (s, m) in ds.train.iter().zip(&per_subject) {
                for (k, v) in m {
                    let _ = writeln!(csv, "{},{},{},{}", s.id, k.0, k.1, v);
                }
            }
            fs::write(&path, csv)?;
            write_stamp(&path, &key)?;
            write_seconds(&path, t.elapsed().as_secs_f64())?;
        }
    }
    Ok(())
}

/// One TTA configuration of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TtaRun {
    pub id: String,
    pub cfg: TtaConfig,
}

/// Expands methods x estimators x lambdas. Lambda only varies FoE-CNN-PCA runs
/// and entropy minimization runs once.
pub fn plan_runs(cfg: &RunConfig) -> Vec<TtaRun> {
    let mut runs = Vec::new();
    for &method in &cfg.tta_methods {
        match method {
            TtaMethod::EntropyMin => {
                runs.push(TtaRun { id: method.to_string(), cfg: cfg.tta_config(method, cfg.tta_estimators[0], 0.0) })
            }
            TtaMethod::FoeCnn => {
                for &est in &cfg.tta_estimators {
                    runs.push(TtaRun { id: format!("{method}-{est}"), cfg: cfg.tta_config(method, est, 0.0) });
                }
            }
            TtaMethod::FoeCnnPca => {
                for &est in &cfg.tta_estimators {
                    for &lambda in &cfg.tta_lambdas {
                        runs.push(TtaRun {
                            id: format!("{method}-{est}-l{lambda}"),
                            cfg: cfg.tta_config(method, est, lambda),
                        });
                    }
                }
            }
        }
    }
    runs
}

/// Test subjects selected for adaptation, in manifest order.
pub fn tta_subjects<'a>(cfg: &RunConfig, test: &'a [Subject]) -> Vec<&'a Subject> {
    let mut count: BTreeMap<u32, usize> = BTreeMap::new();
    test.iter()
        .filter(|s| cfg.tta_domains.contains(&s.domain_id))
        .filter(|s| {
            let c = count.entry(s.domain_id).or_default();
            *c += 1;
            cfg.tta_max_subjects == 0 || *c <= cfg.tta_max_subjects
        })
        .collect()
}

pub fn cmd_tta(cfg: &RunConfig, force: bool) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let ds = load_dataset(&layout)?;
    let (model, fp) = load_strong(&layout)?;
    fs::create_dir_all(layout.metrics())?;
    write_config(cfg)?;
    let subjects = tta_subjects(cfg, &ds.test);
    let mut priors: BTreeMap<String, PriorSet> = BTreeMap::new();
    for &est in &cfg.tta_estimators {
        if cfg.tta_methods.iter().any(|m| *m != TtaMethod::EntropyMin) {
            priors.insert(est.to_string(), load_matching_prior(&layout.prior(est), fp)?);
        }
    }
    for run in plan_runs(cfg) {
        let dir = layout.tta_run(&run.id);
        fs::create_dir_all(&dir)?;
        let t = Instant::now();
        let empty = PriorSet { model_fingerprint: fp, estimator: run.cfg.estimator, subjects: Vec::new(), basis: None };
        let prior = priors.get(&run.cfg.estimator.to_string()).unwrap_or(&empty);
        let rows: Vec<Vec<MetricsRow>> = subjects
            .par_iter()
            .map(|s| {
                let delta_path = dir.join(format!("{}.ftd", s.id));
                let trace_path = dir.join(format!("{}.csv", s.id));
                let key = stamp_key(&[&ds.key, &format!("{fp:016x}{:?}{}", run.cfg, s.seed)]);
                if !force && up_to_date(&delta_path, &key) && trace_path.exists() {
                    return read_metrics(&trace_path);
                }
                let out = adapt_subject(&model, prior, fp, s, &run.cfg)?;
                if let Some(msg) = &out.diverged {
                    log::warn!("{} on {}: {msg}; keeping the lowest-loss parameters", run.id, s.id);
                }
                let rows = MetricsRow::from_trace(&run.id, &s.id, s.domain_id, &run.cfg.method.to_string(), &out.trace);
                save_phi_delta(&delta_path, &PhiDelta::from_model(&out.model, fp))?;
                write_metrics(&trace_path, &rows)?;
                write_stamp(&delta_path, &key)?;
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        let all: Vec<MetricsRow> = rows.into_iter().flatten().collect();
        write_metrics(&layout.metrics().join(format!("tta-{}.csv", run.id)), &all)?;
        info!("{}: {} subjects in {:.0}s", run.id, subjects.len(), t.elapsed().as_secs_f64());
    }
    Ok(())
}

/// Foreground Dice of a model on one subject: (mean, per class).
pub fn subject_dice(model: &Model, s: &Subject) -> Result<(f64, Vec<f64>)> {
    let pred = model.predict(&s.slices, 8)?;
    let labels = predict_labels(&pred.probs)?;
    let d = dice_scores(&labels, &s.labels, model.n_classes())?;
    Ok((d.iter().sum::<f64>() / d.len() as f64, d))
}

fn eval_row(run_id: &str, method: &str, epoch: usize, s: &Subject, dice: (f64, Vec<f64>)) -> MetricsRow {
    MetricsRow {
        run_id: run_id.to_string(),
        subject_id: s.id.clone(),
        domain: s.domain_id,
        method: method.to_string(),
        epoch,
        dice_mean: dice.0,
        dice_per_class: dice.1,
        loss_total: None,
        loss_cnn: None,
        loss_pca: None,
        phi_norm: None,
        wall_ms: 0,
    }
}

/// One line of `significance.csv`: a run against the strong baseline on one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub run_id: String,
    pub domain: u32,
    pub n: usize,
    pub baseline: f64,
    pub adapted: f64,
    pub p_value: Option<f64>,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<Comparison>> {
    let layout = Layout::new(&cfg.out_dir);
    let ds = load_dataset(&layout)?;
    fs::create_dir_all(layout.metrics())?;
    write_config(cfg)?;
    let mut rows = Vec::new();
    let mut strong_fp = None;
    let mut strong_model = None;
    for name in BASELINES {
        let (ckpt, fp) = load_checkpoint(&layout.checkpoint(name))?;
        let r: Vec<MetricsRow> = ds
            .test
            .par_iter()
            .map(|s| Ok(eval_row(&format!("baseline-{name}"), name, 0, s, subject_dice(&ckpt.model, s)?)))
            .collect::<Result<_>>()?;
        rows.extend(r);
        if name == "strong" {
            strong_fp = Some(fp);
            strong_model = Some(ckpt.model);
        }
    }
    let (strong, fp) = (strong_model.unwrap(), strong_fp.unwrap());
    let by_id: BTreeMap<&str, &Subject> = ds.test.iter().map(|s| (s.id.as_str(), s)).collect();
    for run in plan_runs(cfg) {
        let dir = layout.tta_run(&run.id);
        if !dir.exists() {
            continue;
        }
        let mut ids: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".ftd")).map(str::to_string))
            .collect();
        ids.sort();
        let r: Vec<MetricsRow> = ids
            .par_iter()
            .filter_map(|id| by_id.get(id.as_str()).map(|s| (id, *s)))
            .map(|(id, s)| {
                let delta = load_phi_delta(&dir.join(format!("{id}.ftd")))?;
                let mut m = strong.clone();
                delta.apply(&mut m, fp)?;
                Ok(eval_row(&run.id, &run.cfg.method.to_string(), run.cfg.n_epochs, s, subject_dice(&m, s)?))
            })
            .collect::<Result<_>>()?;
        rows.extend(r);
    }
    write_metrics(&layout.metrics().join("eval.csv"), &rows)?;
    let comparisons = compare_to_baseline(&rows, cfg.n_perm, cfg.seed)?;
    let mut csv = String::from("run_id,domain,n,baseline_dice,adapted_dice,delta,p_value\n");
    for c in &comparisons {
        let p = c.p_value.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            c.run_id,
            c.domain,
            c.n,
            c.baseline,
            c.adapted,
            c.adapted - c.baseline,
            p
        );
    }
    fs::write(layout.metrics().join("significance.csv"), csv)?;
    Ok(comparisons)
}

/// Pairs every run's per-subject Dice with the strong baseline, per domain.
pub fn compare_to_baseline(rows: &[MetricsRow], n_perm: usize, seed: u64) -> Result<Vec<Comparison>> {
    let base: BTreeMap<&str, f64> =
        rows.iter().filter(|r| r.run_id == "baseline-strong").map(|r| (r.subject_id.as_str(), r.dice_mean)).collect();
    let mut groups: BTreeMap<(&str, u32), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.run_id.starts_with("baseline-")) {
        if let Some(b) = base.get(r.subject_id.as_str()) {
            groups.entry((r.run_id.as_str(), r.domain)).or_default().push((*b, r.dice_mean));
        }
    }
    groups
        .into_iter()
        .map(|((run, domain), pairs)| {
            let (b, a): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let n = pairs.len();
            let p_value = if n >= 2 { Some(paired_permutation_test(&a, &b, n_perm, seed)?) } else { None };
            Ok(Comparison {
                run_id: run.to_string(),
                domain,
                n,
                baseline: b.iter().sum::<f64>() / n as f64,
                adapted: a.iter().sum::<f64>() / n as f64,
                p_value,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        RunConfig {
            out_dir: dir.to_path_buf(),
            image_size: 32,
            n_slices: 2,
            n_train: 2,
            n_val: 1,
            n_test: 1,
            n_test_shifted: 1,
            n_domains: 1,
            norm_channels: vec![4, 1],
            unet_depth: 2,
            unet_base: 4,
            train_iterations: 3,
            train_batch: 2,
            val_every: 2,
            prior_bins: 32,
            kde_max_samples: 200,
            pca: crate::pca::PcaConfig { r: 4, d: 4, tau: 0.0, g: 2 },
            tta_methods: vec![TtaMethod::FoeCnnPca, TtaMethod::EntropyMin],
            tta_lambdas: vec![0.0, 0.1],
            tta_epochs: 2,
            tta_batch: 2,
            tta_domains: vec![0, 1],
            ..RunConfig::default()
        }
    }

    #[test]
    fn manifest_round_trip_and_determinism() {
        let cfg = RunConfig::default();
        let a = plan_subjects(&cfg);
        assert_eq!(a.len(), 15 + 5 + 5 + 10);
        assert_eq!(a, plan_subjects(&cfg));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, render_manifest(&a)).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), a);
        let none = plan_subjects(&RunConfig { n_domains: 0, ..cfg });
        assert!(none.iter().all(|e| e.domain == 0));
    }

    #[test]
    fn run_plan_expands_lambdas_for_pca_only() {
        let cfg = RunConfig {
            tta_methods: vec![TtaMethod::FoeCnn, TtaMethod::FoeCnnPca, TtaMethod::EntropyMin],
            tta_estimators: vec![Estimator::Gaussian, Estimator::Kde],
            tta_lambdas: vec![0.0, 0.1, 1.0],
            ..RunConfig::default()
        };
        let ids: Vec<String> = plan_runs(&cfg).into_iter().map(|r| r.id).collect();
        assert_eq!(ids.len(), 2 + 6 + 1);
        assert!(ids.contains(&"foe_cnn_pca-kde-l1".to_string()));
        assert!(ids.contains(&"entropy_min".to_string()));
    }

    #[test]
    fn stages_run_end_to_end_and_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_make_data(&cfg, false).unwrap();
        assert!(cmd_make_data(&cfg, false).is_err());
        let manifest = fs::read_to_string(Layout::new(dir.path()).manifest()).unwrap();
        cmd_make_data(&cfg, true).unwrap();
        assert_eq!(fs::read_to_string(Layout::new(dir.path()).manifest()).unwrap(), manifest);

        cmd_train(&cfg, false).unwrap();
        cmd_build_prior(&cfg, false).unwrap();
        cmd_tta(&cfg, false).unwrap();
        let layout = Layout::new(dir.path());
        let trace_file = layout.metrics().join("tta-foe_cnn_pca-gaussian-l0.1.csv");
        let first = fs::read(&trace_file).unwrap();
        let rows = read_metrics(&trace_file).unwrap();
        assert_eq!(rows.len(), 2 * 3);

        let comparisons = cmd_evaluate(&cfg).unwrap();
        assert_eq!(comparisons.len(), 3 * 2);
        let eval = read_metrics(&layout.metrics().join("eval.csv")).unwrap();
        for r in rows.iter().filter(|r| r.epoch == 0) {
            let base = eval.iter().find(|e| e.run_id == "baseline-strong" && e.subject_id == r.subject_id).unwrap();
            assert_eq!(base.dice_per_class, r.dice_per_class);
        }

        // A second run reuses the stamped artifacts and reproduces the traces.
        cmd_tta(&cfg, false).unwrap();
        assert_eq!(fs::read(&trace_file).unwrap(), first);
    }

    #[test]
    fn tta_rejects_prior_from_other_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { tta_methods: vec![TtaMethod::FoeCnn], ..tiny_config(dir.path()) };
        cmd_make_data(&cfg, false).unwrap();
        cmd_train(&cfg, false).unwrap();
        cmd_build_prior(&cfg, false).unwrap();
        let cfg2 = RunConfig { seed: 5, ..cfg.clone() };
        cmd_train(&cfg2, false).unwrap();
        let e = cmd_tta(&cfg2, false).unwrap_err();
        assert!(matches!(e, Error::Fingerprint { .. }), "{e}");
    }
}
