use std::collections::BTreeMap;

use super::kl::{kl_gaussian_tape, kl_grid_tape, kl_pdf};
use crate::error::{Error, Result};
use crate::prior::{ExpertKey, ExpertMap, ExpertPdf, SubjectPrior};
use crate::tensor::{Tape, Var};

/// Shipped weight of the PCA expert term.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cnn_term: f64,
    pub pca_term: f64,
    pub lambda: f64,
    /// Mean over training subjects of each CNN expert's KL.
    pub per_channel: BTreeMap<ExpertKey, f64>,
    pub per_pca: BTreeMap<ExpertKey, f64>,
    /// The PCA term was left out (no active patches on the test subject).
    pub pca_dropped: bool,
}

/// Mean over groups (first key component) of the mean within each group.
fn nested_mean(per: &BTreeMap<ExpertKey, f64>) -> f64 {
    let mut groups: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    for (k, v) in per {
        let e = groups.entry(k.0).or_default();
        e.0 += v;
        e.1 += 1;
    }
    groups.values().map(|(s, n)| s / *n as f64).sum::<f64>() / groups.len().max(1) as f64
}

fn per_expert_kl<'a>(
    priors: &'a [SubjectPrior],
    pick: impl Fn(&'a SubjectPrior) -> &'a ExpertMap,
    test: &ExpertMap,
) -> Result<BTreeMap<ExpertKey, f64>> {
    if priors.is_empty() {
        return Err(Error::invalid("matching loss needs at least one training prior"));
    }
    let mut out = BTreeMap::new();
    for s in priors {
        let map = pick(s);
        if map.len() != test.len() {
            return Err(Error::invalid(format!(
                "prior '{}' has {} experts, test side {}",
                s.subject_id,
                map.len(),
                test.len()
            )));
        }
        for (k, p) in map {
            let q = test.get(k).ok_or_else(|| Error::invalid(format!("test statistics lack expert {k:?}")))?;
            *out.entry(*k).or_insert(0.0) += kl_pdf(p, q)?;
        }
    }
    let n = priors.len() as f64;
    out.values_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Expected CNN-expert divergence over training subjects: mean over layers of
/// the mean over channels of `KL(p_s || p_t)`, averaged over subjects.
pub fn loss_foe_cnn(priors: &[SubjectPrior], test: &ExpertMap) -> Result<LossBreakdown> {
    let per_channel = per_expert_kl(priors, |s| &s.cnn, test)?;
    let cnn_term = nested_mean(&per_channel);
    Ok(LossBreakdown {
        total: cnn_term,
        cnn_term,
        pca_term: 0.0,
        lambda: 0.0,
        per_channel,
        per_pca: BTreeMap::new(),
        pca_dropped: false,
    })
}

/// CNN term plus `lambda` times the PCA term. `test_pca = None` drops the PCA term.
pub fn loss_foe_cnn_pca(
    priors: &[SubjectPrior],
    test_cnn: &ExpertMap,
    test_pca: Option<&ExpertMap>,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let mut out = loss_foe_cnn(priors, test_cnn)?;
    out.lambda = lambda;
    match test_pca {
        None => out.pca_dropped = true,
        Some(test) => {
            if priors.iter().any(|s| s.pca.is_empty()) {
                return Err(Error::invalid("training priors carry no PCA experts"));
            }
            out.per_pca = per_expert_kl(priors, |s| &s.pca, test)?;
            out.pca_term = nested_mean(&out.per_pca);
            out.total = out.cnn_term + lambda * out.pca_term;
        }
    }
    Ok(out)
}

/// Differentiable test-side statistics of one expert group.
pub enum TestExperts {
    /// Per-expert mean and variance, each `[C]`.
    Gaussian { mu: Var, var: Var },
    /// Per-expert unnormalized kernel sums on the prior's grid, each `[n_bins]`.
    Grid { sums: Vec<Var> },
}

/// Experts keyed `(group, 0..)` sharing one representation.
pub struct TapeGroup {
    pub group: u16,
    pub experts: TestExperts,
}

pub struct TapeLoss {
    pub total: Var,
    pub cnn: Var,
    pub pca: Option<Var>,
}

fn group_term(
    tape: &mut Tape,
    priors: &[SubjectPrior],
    pick: impl Fn(&SubjectPrior) -> &ExpertMap,
    group: &TapeGroup,
) -> Result<Var> {
    let n_experts = match &group.experts {
        TestExperts::Gaussian { mu, .. } => tape.shape(*mu).first().copied().unwrap_or(0),
        TestExperts::Grid { sums } => sums.len(),
    };
    if n_experts == 0 {
        return Err(Error::shape(format!("expert group {} is empty", group.group)));
    }
    let mut acc: Option<Var> = None;
    for s in priors {
        let map = pick(s);
        let pdfs: Vec<&ExpertPdf> = (0..n_experts)
            .map(|c| {
                map.get(&ExpertKey(group.group, c as u16)).ok_or_else(|| {
                    Error::invalid(format!("prior '{}' lacks expert ({}, {c})", s.subject_id, group.group))
                })
            })
            .collect::<Result<_>>()?;
        let term = match &group.experts {
            TestExperts::Gaussian { mu, var } => {
                let mut ms = Vec::with_capacity(n_experts);
                let mut ss = Vec::with_capacity(n_experts);
                for p in &pdfs {
                    let ExpertPdf::Gaussian { mu, sigma } = p else {
                        return Err(Error::invalid("Gaussian test statistics against a grid prior"));
                    };
                    ms.push(*mu);
                    ss.push(*sigma);
                }
                let kl = kl_gaussian_tape(tape, &ms, &ss, *mu, *var)?;
                tape.sum(kl)
            }
            TestExperts::Grid { sums } => {
                let mut total: Option<Var> = None;
                for (p, q) in pdfs.iter().zip(sums) {
                    let g =
                        p.as_grid().ok_or_else(|| Error::invalid("grid test statistics against a Gaussian prior"))?;
                    let kl = kl_grid_tape(tape, g, *q)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, kl)?,
                        None => kl,
                    });
                }
                total.expect("group is non-empty")
            }
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| Error::invalid("matching loss needs at least one training prior"))?;
    Ok(tape.scale(acc, 1.0 / (n_experts * priors.len()) as f64))
}

fn nested_tape(
    tape: &mut Tape,
    priors: &[SubjectPrior],
    pick: impl Fn(&SubjectPrior) -> &ExpertMap + Copy,
    groups: &[TapeGroup],
) -> Result<Var> {
    if groups.is_empty() {
        return Err(Error::invalid("no expert groups"));
    }
    let expected: usize = groups
        .iter()
        .map(|g| match &g.experts {
            TestExperts::Gaussian { mu, .. } => tape.shape(*mu).first().copied().unwrap_or(0),
            TestExperts::Grid { sums } => sums.len(),
        })
        .sum();
    if let Some(s) = priors.iter().find(|s| pick(s).len() != expected) {
        return Err(Error::invalid(format!(
            "prior '{}' has {} experts, test side {expected}",
            s.subject_id,
            pick(s).len()
        )));
    }
    let mut acc: Option<Var> = None;
    for g in groups {
        let t = group_term(tape, priors, pick, g)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    Ok(tape.scale(acc.expect("groups are non-empty"), 1.0 / groups.len() as f64))
}

/// The matching loss on the tape; values agree with [`loss_foe_cnn_pca`].
pub fn loss_tape(
    tape: &mut Tape,
    priors: &[SubjectPrior],
    cnn: &[TapeGroup],
    pca: Option<&[TapeGroup]>,
    lambda: f64,
) -> Result<TapeLoss> {
    let cnn_var = nested_tape(tape, priors, |s| &s.cnn, cnn)?;
    let pca_var = match pca {
        Some(groups) => Some(nested_tape(tape, priors, |s| &s.pca, groups)?),
        None => None,
    };
    let total = match pca_var {
        Some(p) => {
            let w = tape.scale(p, lambda);
            tape.add(cnn_var, w)?
        }
        None => cnn_var,
    };
    Ok(TapeLoss { total, cnn: cnn_var, pca: pca_var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::gaussian_grid;
    use crate::tensor::Tensor;

    fn prior(id: &str, entries: &[((u16, u16), f64, f64)]) -> SubjectPrior {
        SubjectPrior {
            subject_id: id.into(),
            model_fingerprint: 0,
            cnn: entries.iter().map(|((l, c), m, s)| (ExpertKey(*l, *c), ExpertPdf::gaussian(*m, *s))).collect(),
            pca: ExpertMap::new(),
        }
    }

    fn map(entries: &[((u16, u16), f64, f64)]) -> ExpertMap {
        entries.iter().map(|((l, c), m, s)| (ExpertKey(*l, *c), ExpertPdf::gaussian(*m, *s))).collect()
    }

    #[test]
    fn self_match_is_zero() {
        let e = [((0, 0), 0.3, 1.2), ((1, 0), -1.0, 0.4)];
        let out = loss_foe_cnn(&[prior("a", &e)], &map(&e)).unwrap();
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn two_subjects_single_expert() {
        let ps = [prior("a", &[((0, 0), 0.0, 1.0)]), prior("b", &[((0, 0), 2.0, 1.0)])];
        let out = loss_foe_cnn(&ps, &map(&[((0, 0), 1.0, 1.0)])).unwrap();
        assert!((out.total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_weighting_is_mean_of_channel_means() {
        let ps = [prior("a", &[((0, 0), 1.0, 1.0), ((1, 0), 2.0, 1.0), ((1, 1), 0.0, 1.0)])];
        let t = map(&[((0, 0), 0.0, 1.0), ((1, 0), 0.0, 1.0), ((1, 1), 0.0, 1.0)]);
        let out = loss_foe_cnn(&ps, &t).unwrap();
        // Layer 1: 0.5. Layer 2: (2.0 + 0.0) / 2.
        assert!((out.total - (0.5 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_keys_are_errors() {
        let ps = [prior("a", &[((0, 0), 0.0, 1.0), ((0, 1), 0.0, 1.0)])];
        assert!(loss_foe_cnn(&ps, &map(&[((0, 0), 0.0, 1.0)])).is_err());
        assert!(loss_foe_cnn(&ps, &map(&[((0, 0), 0.0, 1.0), ((0, 2), 0.0, 1.0)])).is_err());
        assert!(loss_foe_cnn(&[], &map(&[])).is_err());
    }

    #[test]
    fn pca_weighting_and_lambda_zero() {
        let mut p = prior("a", &[((0, 0), 1.0, 1.0)]);
        p.pca = map(&[((0, 0), 0.0, 2.0), ((0, 1), 0.0, 1.0)]);
        let cnn = map(&[((0, 0), 0.0, 1.0)]);
        let pca = map(&[((0, 0), 0.0, 1.0), ((0, 1), 0.0, 1.0)]);
        let base = loss_foe_cnn(std::slice::from_ref(&p), &cnn).unwrap();
        let zero = loss_foe_cnn_pca(std::slice::from_ref(&p), &cnn, Some(&pca), 0.0).unwrap();
        assert_eq!(zero.total.to_bits(), base.total.to_bits());
        let full = loss_foe_cnn_pca(std::slice::from_ref(&p), &cnn, Some(&pca), 0.1).unwrap();
        assert!((full.pca_term - 0.806853 / 2.0).abs() < 1e-6);
        assert_eq!(full.total, full.cnn_term + 0.1 * full.pca_term);
        let dropped = loss_foe_cnn_pca(&[p], &cnn, None, 0.1).unwrap();
        assert!(dropped.pca_dropped && dropped.total == base.total);
    }

    #[test]
    fn subject_order_does_not_matter() {
        let ps = vec![
            prior("a", &[((0, 0), 0.1, 1.0), ((1, 0), 0.0, 0.5)]),
            prior("b", &[((0, 0), 1.1, 0.7), ((1, 0), 0.4, 0.9)]),
            prior("c", &[((0, 0), -0.5, 1.3), ((1, 0), 2.0, 0.2)]),
        ];
        let t = map(&[((0, 0), 0.2, 0.8), ((1, 0), 0.3, 0.6)]);
        let a = loss_foe_cnn(&ps, &t).unwrap().total;
        let rev: Vec<_> = ps.into_iter().rev().collect();
        assert!((a - loss_foe_cnn(&rev, &t).unwrap().total).abs() < 1e-15);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let grid = |m, s| ExpertPdf::Grid(gaussian_grid(m, s, -6.0, 6.0, 64).unwrap());
        let mut a = prior("a", &[((0, 0), 0.1, 1.0), ((0, 1), 0.0, 0.5), ((1, 0), 1.0, 2.0)]);
        a.pca = [(ExpertKey(0, 0), grid(0.0, 1.0)), (ExpertKey(0, 1), grid(0.5, 0.7))].into_iter().collect();
        let mut b = prior("b", &[((0, 0), -0.4, 0.6), ((0, 1), 0.3, 0.9), ((1, 0), 0.0, 1.0)]);
        b.pca = [(ExpertKey(0, 0), grid(1.0, 1.0)), (ExpertKey(0, 1), grid(-0.5, 1.5))].into_iter().collect();
        let priors = [a, b];

        let test_cnn = map(&[((0, 0), 0.0, 1.1), ((0, 1), 0.2, 0.8), ((1, 0), 0.5, 1.5)]);
        let qg = [gaussian_grid(0.2, 1.2, -6.0, 6.0, 64).unwrap(), gaussian_grid(0.0, 0.9, -6.0, 6.0, 64).unwrap()];
        let test_pca: ExpertMap =
            qg.iter().enumerate().map(|(i, g)| (ExpertKey(0, i as u16), ExpertPdf::Grid(g.clone()))).collect();
        let plain = loss_foe_cnn_pca(&priors, &test_cnn, Some(&test_pca), 0.1).unwrap();

        let mut tape = Tape::new();
        let mu0 = tape.param(Tensor::from_vec(vec![0.0, 0.2]));
        let var0 = tape.param(Tensor::from_vec(vec![1.21, 0.64]));
        let mu1 = tape.param(Tensor::from_vec(vec![0.5]));
        let var1 = tape.param(Tensor::from_vec(vec![2.25]));
        let sums: Vec<Var> =
            qg.iter().map(|g| tape.param(Tensor::from_vec(g.densities.iter().map(|d| d * 7.0).collect()))).collect();
        let cnn = [
            TapeGroup { group: 0, experts: TestExperts::Gaussian { mu: mu0, var: var0 } },
            TapeGroup { group: 1, experts: TestExperts::Gaussian { mu: mu1, var: var1 } },
        ];
        let pca = [TapeGroup { group: 0, experts: TestExperts::Grid { sums } }];
        let l = loss_tape(&mut tape, &priors, &cnn, Some(&pca), 0.1).unwrap();
        assert!((tape.value(l.total).item().unwrap() - plain.total).abs() < 1e-12);
        assert!((tape.value(l.cnn).item().unwrap() - plain.cnn_term).abs() < 1e-12);
    }
}
