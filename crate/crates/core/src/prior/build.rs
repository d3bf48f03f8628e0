use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;

use super::pdf::{
    default_span, gaussian_grid, grouped_moments, kde_grid, moments, silverman_alpha, stride_subsample, ExpertPdf,
    Moments, DEFAULT_BINS,
};
use super::set::{Estimator, ExpertKey, ExpertMap, PriorSet, SubjectPrior};
use crate::divergence::kl_grid;
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::pca::{
    fit_pca, foreground_probability, patch_indices, patch_sites, ChannelBasis, PcaConfig, PrincipalBasis,
};
use crate::synth::Subject;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub estimator: Estimator,
    pub n_bins: usize,
    /// Per-channel cap on KDE samples, reached by uniform striding.
    pub kde_max_samples: usize,
    /// `None` disables PCA experts.
    pub pca: Option<PcaConfig>,
    /// Inference batch size.
    pub batch: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Gaussian,
            n_bins: DEFAULT_BINS,
            kde_max_samples: 10_000,
            pca: Some(PcaConfig::default()),
            batch: 8,
        }
    }
}

/// Values of channel `c` of a `[S, C, H, W]` tap, one slice per group.
pub fn channel_planes(tap: &Tensor, c: usize) -> Result<Vec<&[f64]>> {
    let (s, ch, h, w) = tap.dims4()?;
    if c >= ch {
        return Err(Error::shape(format!("channel {c} of a {ch}-channel tap")));
    }
    let hw = h * w;
    Ok((0..s).map(|i| &tap.data()[(i * ch + c) * hw..(i * ch + c + 1) * hw]).collect())
}

/// Two-level moments of every tapped channel, keyed `(layer, channel)`.
pub fn tap_moments(taps: &[Tensor]) -> Result<BTreeMap<ExpertKey, Moments>> {
    let mut out = BTreeMap::new();
    for (l, tap) in taps.iter().enumerate() {
        for c in 0..tap.shape()[1] {
            out.insert(ExpertKey(l as u16, c as u16), grouped_moments(channel_planes(tap, c)?)?);
        }
    }
    Ok(out)
}

fn check_subject(subject: &Subject) -> Result<()> {
    if subject.n_slices() == 0 {
        return Err(Error::invalid(format!("subject '{}' has no slices", subject.id)));
    }
    Ok(())
}

/// Gaussian expert per tapped channel of the frozen model on `subject`.
pub fn compute_gaussian_pdfs(model: &Model, subject: &Subject) -> Result<ExpertMap> {
    check_subject(subject)?;
    let pred = model.predict(&subject.slices, 8)?;
    Ok(tap_moments(&pred.taps)?.into_iter().map(|(k, m)| (k, m.to_pdf())).collect())
}

/// KDE expert per tapped channel on that channel's own `mu +- 5 sigma` grid.
pub fn compute_kde_pdfs(model: &Model, subject: &Subject, n_bins: usize, max_samples: usize) -> Result<ExpertMap> {
    check_subject(subject)?;
    let pred = model.predict(&subject.slices, 8)?;
    let mut out = ExpertMap::new();
    for (key, m) in tap_moments(&pred.taps)? {
        let samples =
            stride_subsample(&channel_planes(&pred.taps[key.0 as usize], key.1 as usize)?.concat(), max_samples);
        let (lo, hi) = default_span(m);
        out.insert(key, ExpertPdf::Grid(kde_grid(&samples, lo, hi, n_bins, silverman_alpha(m.std(), samples.len()))?));
    }
    Ok(out)
}

/// Per channel, `KL(kde || gridded Gaussian fit)` on the channel's own grid.
pub fn kde_gaussian_divergence(
    model: &Model,
    subject: &Subject,
    n_bins: usize,
    max_samples: usize,
) -> Result<BTreeMap<ExpertKey, f64>> {
    let kde = compute_kde_pdfs(model, subject, n_bins, max_samples)?;
    let gauss = compute_gaussian_pdfs(model, subject)?;
    kde.iter()
        .map(|(k, pdf)| {
            let g = pdf.as_grid().expect("kde pdfs are grids");
            let ExpertPdf::Gaussian { mu, sigma } = gauss[k] else { unreachable!() };
            let fit = gaussian_grid(mu, sigma, g.u_min, g.u_max, g.n_bins())?;
            Ok((*k, kl_grid(g, &fit)?))
        })
        .collect()
}

/// Active patches of every channel of the last tap, pooled over slices:
/// `out[c]` holds flattened `r x r` patches.
pub fn active_patches(last_tap: &Tensor, probs: &Tensor, cfg: &PcaConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    let (s, ch, h, w) = last_tap.dims4()?;
    let (ps, k, ph, pw) = probs.dims4()?;
    if (ps, ph, pw) != (s, h, w) {
        return Err(Error::shape("last tap and probabilities differ in size"));
    }
    let sites = patch_sites(h, w, cfg.r, cfg.d)?;
    let mut out = vec![Vec::new(); ch];
    for i in 0..s {
        let fg = foreground_probability(probs.data(), k, h * w, i);
        for site in crate::pca::filter_active(&sites, &fg, w, cfg.tau) {
            for (c, acc) in out.iter_mut().enumerate() {
                let plane = (i * ch + c) * h * w;
                acc.push(patch_indices(&site, w, cfg.r, plane).map(|j| last_tap.data()[j]).collect());
            }
        }
    }
    Ok(out)
}

/// Gaussian loading experts `(channel, component)` from loadings `[patch][component]`.
/// A single loading gives a floored Gaussian at that value.
pub fn loading_pdfs(channel: u16, loadings: &[Vec<f64>], g: usize) -> Result<ExpertMap> {
    if loadings.is_empty() {
        return Err(Error::invalid("loading pdfs need at least one loading"));
    }
    let mut out = ExpertMap::new();
    for j in 0..g {
        let col: Vec<f64> = loadings.iter().map(|v| v[j]).collect();
        out.insert(ExpertKey(channel, j as u16), moments(&col)?.to_pdf());
    }
    Ok(out)
}

struct Summary {
    id: String,
    moments: BTreeMap<ExpertKey, Moments>,
    samples: BTreeMap<ExpertKey, Vec<f64>>,
    patches: Vec<Vec<Vec<f64>>>,
}

fn summarize(model: &Model, subject: &Subject, cfg: &PriorConfig) -> Result<Summary> {
    check_subject(subject)?;
    let pred = model.predict(&subject.slices, cfg.batch)?;
    let moments = tap_moments(&pred.taps)?;
    let mut samples = BTreeMap::new();
    if cfg.estimator == Estimator::Kde {
        for key in moments.keys() {
            let all = channel_planes(&pred.taps[key.0 as usize], key.1 as usize)?.concat();
            samples.insert(*key, stride_subsample(&all, cfg.kde_max_samples));
        }
    }
    let patches = match &cfg.pca {
        Some(p) => active_patches(pred.taps.last().expect("model has taps"), &pred.probs, p)?,
        None => Vec::new(),
    };
    Ok(Summary { id: subject.id.clone(), moments, samples, patches })
}

/// Union of the per-subject `mu +- 5 sigma` spans of one expert.
fn union_span<'a>(ms: impl Iterator<Item = &'a Moments>) -> (f64, f64) {
    ms.map(|m| default_span(*m)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (lo, hi)| (a.min(lo), b.max(hi)))
}

/// KDE experts sharing one grid per key across subjects.
fn kde_maps(per_subject: &[BTreeMap<ExpertKey, Vec<f64>>], n_bins: usize) -> Result<Vec<ExpertMap>> {
    let mut spans = BTreeMap::new();
    let mut subject_moments = Vec::new();
    for samples in per_subject {
        let m: BTreeMap<ExpertKey, Moments> =
            samples.iter().map(|(k, v)| Ok((*k, moments(v)?))).collect::<Result<_>>()?;
        subject_moments.push(m);
    }
    for key in per_subject[0].keys() {
        spans.insert(*key, union_span(subject_moments.iter().map(|m| &m[key])));
    }
    per_subject
        .par_iter()
        .zip(&subject_moments)
        .map(|(samples, ms)| {
            samples
                .iter()
                .map(|(k, v)| {
                    let (lo, hi) = spans[k];
                    let alpha = silverman_alpha(ms[k].std(), v.len());
                    Ok((*k, ExpertPdf::Grid(kde_grid(v, lo, hi, n_bins, alpha)?)))
                })
                .collect()
        })
        .collect()
}

/// Grid spans shared by all subjects of a KDE prior, keyed like its entries.
pub fn shared_spans(map: &ExpertMap) -> BTreeMap<ExpertKey, (f64, f64, usize)> {
    map.iter().filter_map(|(k, p)| p.as_grid().map(|g| (*k, (g.u_min, g.u_max, g.n_bins())))).collect()
}

/// Expert priors for every training subject, plus the shared PCA basis when enabled.
pub fn build_prior_set(
    model: &Model,
    model_fingerprint: u64,
    subjects: &[Subject],
    cfg: &PriorConfig,
) -> Result<PriorSet> {
    if subjects.is_empty() {
        return Err(Error::invalid("a prior needs at least one training subject"));
    }
    if cfg.estimator == Estimator::Kde && cfg.n_bins < super::pdf::MIN_BINS {
        return Err(Error::invalid(format!("n_bins {} below {}", cfg.n_bins, super::pdf::MIN_BINS)));
    }
    if let Some(p) = &cfg.pca {
        p.validate()?;
    }
    let summaries: Vec<Summary> = subjects.par_iter().map(|s| summarize(model, s, cfg)).collect::<Result<_>>()?;

    let cnn_maps: Vec<ExpertMap> = match cfg.estimator {
        Estimator::Gaussian => {
            summaries.iter().map(|s| s.moments.iter().map(|(k, m)| (*k, m.to_pdf())).collect()).collect()
        }
        Estimator::Kde => kde_maps(&summaries.iter().map(|s| s.samples.clone()).collect::<Vec<_>>(), cfg.n_bins)?,
    };

    let (basis, pca_maps) = match &cfg.pca {
        None => (None, vec![ExpertMap::new(); summaries.len()]),
        Some(pcfg) => {
            for s in &summaries {
                if s.patches.first().is_none_or(|p| p.is_empty()) {
                    return Err(Error::invalid(format!(
                        "training subject '{}' has no active patches at tau = {}",
                        s.id, pcfg.tau
                    )));
                }
            }
            let n_channels = summaries[0].patches.len();
            let channels: Vec<ChannelBasis> = (0..n_channels)
                .into_par_iter()
                .map(|c| {
                    let pooled: Vec<&[f64]> =
                        summaries.iter().flat_map(|s| s.patches[c].iter().map(|p| p.as_slice())).collect();
                    fit_pca(&pooled, pcfg.g)
                })
                .collect::<Result<_>>()?;
            let loadings: Vec<Vec<Vec<Vec<f64>>>> = summaries
                .iter()
                .map(|s| {
                    channels
                        .iter()
                        .zip(&s.patches)
                        .map(|(b, ps)| ps.iter().map(|p| b.project(p)).collect::<Result<Vec<_>>>())
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let maps = match cfg.estimator {
                Estimator::Gaussian => loadings
                    .iter()
                    .map(|per_channel| {
                        let mut m = ExpertMap::new();
                        for (c, v) in per_channel.iter().enumerate() {
                            m.extend(loading_pdfs(c as u16, v, pcfg.g)?);
                        }
                        Ok(m)
                    })
                    .collect::<Result<Vec<_>>>()?,
                Estimator::Kde => {
                    let samples: Vec<BTreeMap<ExpertKey, Vec<f64>>> = loadings
                        .iter()
                        .map(|per_channel| {
                            let mut m = BTreeMap::new();
                            for (c, v) in per_channel.iter().enumerate() {
                                for j in 0..pcfg.g {
                                    let col: Vec<f64> = v.iter().map(|x| x[j]).collect();
                                    m.insert(
                                        ExpertKey(c as u16, j as u16),
                                        stride_subsample(&col, cfg.kde_max_samples),
                                    );
                                }
                            }
                            m
                        })
                        .collect();
                    kde_maps(&samples, cfg.n_bins)?
                }
            };
            (Some(PrincipalBasis { config: *pcfg, channels }), maps)
        }
    };

    let subjects = summaries
        .into_iter()
        .zip(cnn_maps.into_iter().zip(pca_maps))
        .map(|(s, (cnn, pca))| SubjectPrior { subject_id: s.id, model_fingerprint, cnn, pca })
        .collect();
    let set = PriorSet { model_fingerprint, estimator: cfg.estimator, subjects, basis };
    set.validate()?;
    if set.subjects.len() == 1 {
        warn!("prior built from a single training subject");
    }
    Ok(set)
}
