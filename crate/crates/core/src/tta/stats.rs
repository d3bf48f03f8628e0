//! Test-side expert statistics over a whole subject and the per-batch surrogate
//! objectives whose gradients sum to the gradient of the matching loss.

use std::collections::BTreeMap;

use crate::divergence::{loss_tape, TapeGroup, TestExperts};
use crate::error::{Error, Result};
use crate::nets::{ForwardOptions, ForwardOutput, Model};
use crate::pca::{filter_active, foreground_probability, patch_indices, patch_sites, PatchSite, PrincipalBasis};
use crate::prior::{
    bin_centers, grouped_moments, kde_sums, moments, silverman_alpha, Estimator, ExpertKey, ExpertMap, ExpertPdf,
    GridPdf, Moments, SubjectPrior,
};
use crate::synth::Subject;
use crate::tensor::{Tape, Tensor, Var};

/// One forward batch kept alive until its surrogate has been differentiated.
pub(crate) struct BatchPass {
    pub tape: Tape,
    pub out: ForwardOutput,
    /// Subject slice indices, in batch order.
    pub slices: Vec<usize>,
}

pub(crate) fn forward_batches(
    model: &Model,
    subject: &Subject,
    order: &[usize],
    batch: usize,
) -> Result<Vec<BatchPass>> {
    let hw = subject.pixels_per_slice();
    let (h, w) = subject.size();
    order
        .chunks(batch.max(1))
        .map(|idx| {
            let mut data = Vec::with_capacity(idx.len() * hw);
            for &s in idx {
                data.extend_from_slice(&subject.slices.data()[s * hw..(s + 1) * hw]);
            }
            let x = Tensor::new(vec![idx.len(), 1, h, w], data)?;
            let mut tape = Tape::new();
            let out = model.forward_with_taps(&mut tape, &x, ForwardOptions::adapt_norm())?;
            tape.ensure_finite()?;
            Ok(BatchPass { tape, out, slices: idx.to_vec() })
        })
        .collect()
}

/// Where each subject slice lives: `(batch, position in batch)`.
fn slice_locations(passes: &[BatchPass], n_slices: usize) -> Vec<(usize, usize)> {
    let mut loc = vec![(0, 0); n_slices];
    for (b, p) in passes.iter().enumerate() {
        for (i, s) in p.slices.iter().enumerate() {
            loc[*s] = (b, i);
        }
    }
    loc
}

/// Kernel-density state of one expert on its prior grid.
pub(crate) struct KdeStat {
    pub grid: (f64, f64, usize),
    pub alpha: f64,
    /// Positions in the group's sample index space.
    pub positions: Vec<usize>,
    pub sums: Vec<f64>,
}

/// Detached statistics of a group of experts sharing a first key component.
pub(crate) struct GroupStats {
    pub group: u16,
    /// Samples per expert.
    pub n: usize,
    pub moments: Vec<Moments>,
    pub kde: Option<Vec<KdeStat>>,
}

impl GroupStats {
    fn pdfs(&self, out: &mut ExpertMap) -> Result<()> {
        for (c, m) in self.moments.iter().enumerate() {
            let key = ExpertKey(self.group, c as u16);
            let pdf = match &self.kde {
                None => m.to_pdf(),
                Some(k) => {
                    let k = &k[c];
                    let (lo, hi, n) = k.grid;
                    let d = if k.sums.iter().any(|v| *v > 0.0) { k.sums.clone() } else { vec![1.0; n] };
                    ExpertPdf::Grid(GridPdf::new(lo, hi, d)?.normalized()?)
                }
            };
            out.insert(key, pdf);
        }
        Ok(())
    }
}

/// An active patch: subject slice and site.
pub(crate) type ActiveEntry = (usize, PatchSite);

pub(crate) struct PcaStats {
    pub groups: Vec<GroupStats>,
    pub active: Vec<ActiveEntry>,
}

/// Test-side statistics of one epoch.
pub struct TestStats {
    pub cnn: ExpertMap,
    /// `None` when PCA experts are disabled or the subject has no active patches.
    pub pca: Option<ExpertMap>,
    pub(crate) cnn_groups: Vec<GroupStats>,
    pub(crate) pca_stats: Option<PcaStats>,
}

fn kde_stat(values: &[f64], positions: Vec<usize>, grid: (f64, f64, usize), sigma: f64) -> KdeStat {
    let alpha = silverman_alpha(sigma, positions.len());
    let centers = bin_centers(grid.0, grid.1, grid.2);
    let samples: Vec<f64> = positions.iter().map(|p| values[*p]).collect();
    KdeStat { grid, alpha, sums: kde_sums(&samples, &centers, alpha), positions }
}

fn stride_positions(n: usize, cap: usize) -> Vec<usize> {
    let stride = n.div_ceil(cap.max(1)).max(1);
    (0..n).step_by(stride).collect()
}

fn prior_grid(prior: &SubjectPrior, key: ExpertKey, pca: bool) -> Result<(f64, f64, usize)> {
    let map = if pca { &prior.pca } else { &prior.cnn };
    let g = map
        .get(&key)
        .and_then(ExpertPdf::as_grid)
        .ok_or_else(|| Error::invalid(format!("KDE statistics need a grid prior for expert {key:?}")))?;
    Ok((g.u_min, g.u_max, g.n_bins()))
}

pub(crate) struct StatsRequest<'a> {
    pub estimator: Estimator,
    pub reference: &'a SubjectPrior,
    pub basis: Option<&'a PrincipalBasis>,
    pub kde_max_samples: usize,
}

pub(crate) fn compute_stats(passes: &[BatchPass], n_slices: usize, req: &StatsRequest<'_>) -> Result<TestStats> {
    let loc = slice_locations(passes, n_slices);
    let n_taps = passes[0].out.taps.len();
    let mut cnn_groups = Vec::with_capacity(n_taps);
    for l in 0..n_taps {
        let (_, ch, h, w) = passes[0].tape.value(passes[0].out.taps[l]).dims4()?;
        let hw = h * w;
        let plane = |s: usize, c: usize| {
            let (b, i) = loc[s];
            let t = passes[b].tape.value(passes[b].out.taps[l]).data();
            &t[(i * ch + c) * hw..(i * ch + c + 1) * hw]
        };
        let mut ms = Vec::with_capacity(ch);
        let mut kde = Vec::new();
        for c in 0..ch {
            let m = grouped_moments((0..n_slices).map(|s| plane(s, c)))?;
            if req.estimator == Estimator::Kde {
                let all: Vec<f64> = (0..n_slices).flat_map(|s| plane(s, c).iter().copied()).collect();
                let grid = prior_grid(req.reference, ExpertKey(l as u16, c as u16), false)?;
                kde.push(kde_stat(&all, stride_positions(all.len(), req.kde_max_samples), grid, m.std()));
            }
            ms.push(m);
        }
        cnn_groups.push(GroupStats {
            group: l as u16,
            n: n_slices * hw,
            moments: ms,
            kde: (req.estimator == Estimator::Kde).then_some(kde),
        });
    }
    let mut cnn = ExpertMap::new();
    for g in &cnn_groups {
        g.pdfs(&mut cnn)?;
    }

    let pca_stats = match req.basis {
        None => None,
        Some(basis) => pca_stats(passes, &loc, basis, req)?,
    };
    let pca = match &pca_stats {
        None => None,
        Some(p) => {
            let mut m = ExpertMap::new();
            for g in &p.groups {
                g.pdfs(&mut m)?;
            }
            Some(m)
        }
    };
    Ok(TestStats { cnn, pca, cnn_groups, pca_stats })
}

fn pca_stats(
    passes: &[BatchPass],
    loc: &[(usize, usize)],
    basis: &PrincipalBasis,
    req: &StatsRequest<'_>,
) -> Result<Option<PcaStats>> {
    let cfg = basis.config;
    let last = *passes[0].out.taps.last().expect("model has taps");
    let (_, ch, h, w) = passes[0].tape.value(last).dims4()?;
    if ch != basis.channels.len() {
        return Err(Error::shape(format!("basis has {} channels, last tap {ch}", basis.channels.len())));
    }
    let (_, k, _, _) = passes[0].tape.value(passes[0].out.probs).dims4()?;
    let hw = h * w;
    let sites = patch_sites(h, w, cfg.r, cfg.d)?;
    let mut active = Vec::new();
    for (s, &(b, i)) in loc.iter().enumerate() {
        let fg = foreground_probability(passes[b].tape.value(passes[b].out.probs).data(), k, hw, i);
        active.extend(filter_active(&sites, &fg, w, cfg.tau).into_iter().map(|site| (s, site)));
    }
    if active.is_empty() {
        return Ok(None);
    }
    let positions = stride_positions(active.len(), req.kde_max_samples);
    let mut groups = Vec::with_capacity(ch);
    for (c, cb) in basis.channels.iter().enumerate() {
        let loadings: Vec<Vec<f64>> = active
            .iter()
            .map(|(s, site)| {
                let (b, i) = loc[*s];
                let t = passes[b].tape.value(last).data();
                let patch: Vec<f64> = patch_indices(site, w, cfg.r, (i * ch + c) * hw).map(|j| t[j]).collect();
                cb.project(&patch)
            })
            .collect::<Result<_>>()?;
        let mut ms = Vec::with_capacity(cfg.g);
        let mut kde = Vec::new();
        for g in 0..cb.components.len() {
            let col: Vec<f64> = loadings.iter().map(|v| v[g]).collect();
            let m = moments(&col)?;
            if req.estimator == Estimator::Kde {
                let grid = prior_grid(req.reference, ExpertKey(c as u16, g as u16), true)?;
                kde.push(kde_stat(&col, positions.clone(), grid, m.std()));
            }
            ms.push(m);
        }
        groups.push(GroupStats {
            group: c as u16,
            n: active.len(),
            moments: ms,
            kde: (req.estimator == Estimator::Kde).then_some(kde),
        });
    }
    Ok(Some(PcaStats { groups, active }))
}

/// `dL/d(statistic)` for one group.
pub(crate) enum GroupGrad {
    Gaussian { d_mean: Vec<f64>, d_var: Vec<f64> },
    Kde { d_sums: Vec<Vec<f64>> },
}

pub(crate) struct LossGrads {
    pub total: f64,
    pub cnn: Vec<GroupGrad>,
    pub pca: Option<Vec<GroupGrad>>,
}

fn stat_leaves(tape: &mut Tape, groups: &[GroupStats]) -> Vec<(TapeGroup, Vec<Var>)> {
    groups
        .iter()
        .map(|g| match &g.kde {
            None => {
                let mu = tape.param(Tensor::from_vec(g.moments.iter().map(|m| m.mean).collect()));
                let var = tape.param(Tensor::from_vec(g.moments.iter().map(|m| m.var).collect()));
                (TapeGroup { group: g.group, experts: TestExperts::Gaussian { mu, var } }, vec![mu, var])
            }
            Some(k) => {
                let sums: Vec<Var> = k.iter().map(|s| tape.param(Tensor::from_vec(s.sums.clone()))).collect();
                (TapeGroup { group: g.group, experts: TestExperts::Grid { sums: sums.clone() } }, sums)
            }
        })
        .collect()
}

fn read_grads(grads: &crate::tensor::Gradients, groups: &[GroupStats], leaves: &[Vec<Var>]) -> Vec<GroupGrad> {
    groups
        .iter()
        .zip(leaves)
        .map(|(g, vars)| match &g.kde {
            None => {
                GroupGrad::Gaussian { d_mean: grads.wrt(vars[0]).into_data(), d_var: grads.wrt(vars[1]).into_data() }
            }
            Some(_) => GroupGrad::Kde { d_sums: vars.iter().map(|v| grads.wrt(*v).into_data()).collect() },
        })
        .collect()
}

/// Gradient of the matching loss with respect to the test statistics.
pub(crate) fn loss_gradients(priors: &[SubjectPrior], stats: &TestStats, lambda: f64) -> Result<LossGrads> {
    let mut tape = Tape::new();
    let cnn = stat_leaves(&mut tape, &stats.cnn_groups);
    let pca = stats.pca_stats.as_ref().map(|p| stat_leaves(&mut tape, &p.groups));
    let (cnn_groups, cnn_vars): (Vec<TapeGroup>, Vec<Vec<Var>>) = cnn.into_iter().unzip();
    let pca_split: Option<(Vec<TapeGroup>, Vec<Vec<Var>>)> = pca.map(|p| p.into_iter().unzip());
    let loss = loss_tape(&mut tape, priors, &cnn_groups, pca_split.as_ref().map(|(g, _)| g.as_slice()), lambda)?;
    let total = tape.value(loss.total).item()?;
    let grads = tape.backward(loss.total)?;
    Ok(LossGrads {
        total,
        cnn: read_grads(&grads, &stats.cnn_groups, &cnn_vars),
        pca: match (&stats.pca_stats, &pca_split) {
            (Some(p), Some((_, vars))) => Some(read_grads(&grads, &p.groups, vars)),
            _ => None,
        },
    })
}

fn add_term(tape: &mut Tape, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, term)?,
        None => term,
    }))
}

/// `sum A u + B (u - mean)^2` with per-expert coefficients broadcast along `axis` of `u`.
fn moment_surrogate(
    tape: &mut Tape,
    u: Var,
    axis: usize,
    group: &GroupStats,
    d_mean: &[f64],
    d_var: &[f64],
) -> Result<Var> {
    let rank = tape.shape(u).len();
    let c = group.moments.len();
    let mut shape = vec![1; rank];
    shape[axis] = c;
    let n = group.n as f64;
    let coef = |v: Vec<f64>| Tensor::new(shape.clone(), v);
    let a = tape.constant(coef(d_mean.iter().map(|g| g / n).collect())?);
    let b = tape.constant(coef(d_var.iter().map(|g| g / n).collect())?);
    let mu = tape.constant(coef(group.moments.iter().map(|m| m.mean).collect())?);
    let lin = tape.mul(u, a)?;
    let lin = tape.sum(lin);
    let d = tape.sub(u, mu)?;
    let d2 = tape.square(d);
    let quad = tape.mul(d2, b)?;
    let quad = tape.sum(quad);
    tape.add(lin, quad)
}

fn kde_surrogate(tape: &mut Tape, samples: Var, k: &KdeStat, d_sums: &[f64]) -> Result<Var> {
    let (lo, hi, n) = k.grid;
    let s = tape.kde_sums(samples, bin_centers(lo, hi, n), k.alpha)?;
    let g = tape.constant(Tensor::from_vec(d_sums.to_vec()));
    let t = tape.mul(s, g)?;
    Ok(tape.sum(t))
}

/// Builds the surrogate of one batch; its gradient with respect to the
/// normalization parameters is that batch's share of the loss gradient.
pub(crate) fn batch_surrogate(
    pass: &mut BatchPass,
    stats: &TestStats,
    grads: &LossGrads,
    basis: Option<&PrincipalBasis>,
) -> Result<Option<Var>> {
    let local: BTreeMap<usize, usize> = pass.slices.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let tape = &mut pass.tape;
    let mut acc = None;
    for ((l, group), grad) in stats.cnn_groups.iter().enumerate().zip(&grads.cnn) {
        let u = pass.out.taps[l];
        match grad {
            GroupGrad::Gaussian { d_mean, d_var } => {
                let t = moment_surrogate(tape, u, 1, group, d_mean, d_var)?;
                acc = add_term(tape, acc, t)?;
            }
            GroupGrad::Kde { d_sums } => {
                let (_, ch, h, w) = tape.value(u).dims4()?;
                let hw = h * w;
                for (c, (k, ds)) in group.kde.as_ref().expect("kde stats").iter().zip(d_sums).enumerate() {
                    let idx: Vec<usize> = k
                        .positions
                        .iter()
                        .filter_map(|p| local.get(&(p / hw)).map(|i| (i * ch + c) * hw + p % hw))
                        .collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let n = idx.len();
                    let samples = tape.gather(u, idx, &[n])?;
                    let t = kde_surrogate(tape, samples, k, ds)?;
                    acc = add_term(tape, acc, t)?;
                }
            }
        }
    }
    if let (Some(p), Some(pg), Some(basis)) = (&stats.pca_stats, &grads.pca, basis) {
        let cfg = basis.config;
        let last = *pass.out.taps.last().expect("model has taps");
        let (_, ch, h, w) = tape.value(last).dims4()?;
        let hw = h * w;
        let mine: Vec<(usize, &ActiveEntry)> =
            p.active.iter().enumerate().filter(|(_, (s, _))| local.contains_key(s)).collect();
        if !mine.is_empty() {
            for (c, (group, grad)) in p.groups.iter().zip(pg).enumerate() {
                let cb = &basis.channels[c];
                let gather_patches = |tape: &mut Tape, entries: &[&ActiveEntry]| -> Result<Var> {
                    let idx: Vec<usize> = entries
                        .iter()
                        .flat_map(|(s, site)| patch_indices(site, w, cfg.r, (local[s] * ch + c) * hw))
                        .collect();
                    tape.gather(last, idx, &[entries.len(), cfg.r * cfg.r])
                };
                match grad {
                    GroupGrad::Gaussian { d_mean, d_var } => {
                        let entries: Vec<&ActiveEntry> = mine.iter().map(|(_, e)| *e).collect();
                        let patches = gather_patches(tape, &entries)?;
                        let v = cb.project_tape(tape, patches)?;
                        let t = moment_surrogate(tape, v, 1, group, d_mean, d_var)?;
                        acc = add_term(tape, acc, t)?;
                    }
                    GroupGrad::Kde { d_sums } => {
                        let kde = group.kde.as_ref().expect("kde stats");
                        let chosen = &kde.first().expect("non-empty group").positions;
                        let entries: Vec<&ActiveEntry> =
                            mine.iter().filter(|(j, _)| chosen.binary_search(j).is_ok()).map(|(_, e)| *e).collect();
                        if entries.is_empty() {
                            continue;
                        }
                        let patches = gather_patches(tape, &entries)?;
                        let v = cb.project_tape(tape, patches)?;
                        let gn = cb.components.len();
                        for (g, (k, ds)) in kde.iter().zip(d_sums).enumerate() {
                            let col =
                                tape.gather(v, (0..entries.len()).map(|i| i * gn + g).collect(), &[entries.len()])?;
                            let t = kde_surrogate(tape, col, k, ds)?;
                            acc = add_term(tape, acc, t)?;
                        }
                    }
                }
            }
        }
    }
    Ok(acc)
}
