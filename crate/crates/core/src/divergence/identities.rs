use super::kl::{kl_gaussian, kl_grid};
use crate::error::{Error, Result};
use crate::prior::GridPdf;

/// Both sides of the subject-aggregation identity
/// `KL(E_s p_s || p_t) = -E_s KL(p_s || E_s p_s) + E_s KL(p_s || p_t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregationCheck {
    /// `KL(mixture || p_t)`.
    pub lhs: f64,
    pub rhs: f64,
    /// `E_s KL(p_s || p_t)`, an upper bound on `lhs`.
    pub expected_kl: f64,
    pub gap: f64,
}

pub fn check_subject_aggregation_identity(
    pdfs: &[GridPdf],
    weights: &[f64],
    p_t: &GridPdf,
) -> Result<AggregationCheck> {
    if pdfs.is_empty() || pdfs.len() != weights.len() {
        return Err(Error::invalid("need one weight per subject density"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("weights must be non-negative and sum to one"));
    }
    if pdfs.iter().any(|p| !p.same_grid(p_t)) {
        return Err(Error::invalid("densities must share the test grid"));
    }
    let mut mix = vec![0.0; p_t.n_bins()];
    for (p, w) in pdfs.iter().zip(weights) {
        mix.iter_mut().zip(&p.densities).for_each(|(m, d)| *m += w * d);
    }
    let mixture = GridPdf::new(p_t.u_min, p_t.u_max, mix)?;
    let lhs = kl_grid(&mixture, p_t)?;
    let mut to_mix = 0.0;
    let mut expected_kl = 0.0;
    for (p, w) in pdfs.iter().zip(weights) {
        to_mix += w * kl_grid(p, &mixture)?;
        expected_kl += w * kl_grid(p, p_t)?;
    }
    let rhs = expected_kl - to_mix;
    Ok(AggregationCheck { lhs, rhs, expected_kl, gap: (lhs - rhs).abs() })
}

/// The joint KL of two diagonal Gaussians against the sum of per-dimension KLs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorizationCheck {
    pub joint_kl: f64,
    pub sum_of_1d_kls: f64,
    pub gap: f64,
}

/// `pairs[j] = ((mu_s, sigma_s), (mu_t, sigma_t))`. The joint value uses the
/// multivariate formula `0.5 (tr(S_t^-1 S_s) + d^T S_t^-1 d - J + ln det S_t - ln det S_s)`.
pub fn check_factorized_kl_decomposition(pairs: &[((f64, f64), (f64, f64))]) -> Result<FactorizationCheck> {
    if pairs.is_empty() {
        return Err(Error::invalid("need at least one dimension"));
    }
    let j = pairs.len() as f64;
    let mut trace = 0.0;
    let mut maha = 0.0;
    let mut det_s = 1.0;
    let mut det_t = 1.0;
    let mut sum = 0.0;
    for &((ms, ss), (mt, st)) in pairs {
        trace += (ss * ss) / (st * st);
        maha += (mt - ms) * (mt - ms) / (st * st);
        det_s *= ss * ss;
        det_t *= st * st;
        sum += kl_gaussian(ms, ss, mt, st)?;
    }
    let joint_kl = 0.5 * (trace + maha - j + (det_t / det_s).ln());
    Ok(FactorizationCheck { joint_kl, sum_of_1d_kls: sum, gap: (joint_kl - sum).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::gaussian_grid;

    #[test]
    fn single_subject_collapses() {
        let p = gaussian_grid(0.0, 1.0, -8.0, 10.0, 1024).unwrap();
        let t = gaussian_grid(1.0, 1.3, -8.0, 10.0, 1024).unwrap();
        let c = check_subject_aggregation_identity(std::slice::from_ref(&p), &[1.0], &t).unwrap();
        assert!(c.gap < 1e-12);
        assert!((c.lhs - kl_grid(&p, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn two_subject_example() {
        let g = |m| gaussian_grid(m, 1.0, -8.0, 10.0, 1024).unwrap();
        let c = check_subject_aggregation_identity(&[g(0.0), g(2.0)], &[0.5, 0.5], &g(1.0)).unwrap();
        assert!(c.gap < 1e-6);
        assert!(c.lhs <= c.expected_kl);
        let mixture = GridPdf::new(
            -8.0,
            10.0,
            g(0.0).densities.iter().zip(&g(2.0).densities).map(|(a, b)| 0.5 * (a + b)).collect(),
        )
        .unwrap();
        let c = check_subject_aggregation_identity(&[g(0.0), g(2.0)], &[0.5, 0.5], &mixture).unwrap();
        assert!(c.lhs.abs() < 1e-12 && c.expected_kl > 0.0);
    }

    #[test]
    fn bad_weights_or_grids() {
        let g = gaussian_grid(0.0, 1.0, -5.0, 5.0, 64).unwrap();
        assert!(check_subject_aggregation_identity(std::slice::from_ref(&g), &[0.5], &g).is_err());
        let other = gaussian_grid(0.0, 1.0, -5.0, 6.0, 64).unwrap();
        assert!(check_subject_aggregation_identity(&[g], &[1.0], &other).is_err());
    }

    #[test]
    fn factorized_examples() {
        let c = check_factorized_kl_decomposition(&[
            ((0.0, 1.0), (1.0, 1.0)),
            ((0.0, 2.0), (0.0, 1.0)),
            ((5.0, 1.0), (5.0, 1.0)),
        ])
        .unwrap();
        assert!((c.sum_of_1d_kls - 1.3069).abs() < 1e-4);
        assert!(c.gap < 1e-9);
        let same = check_factorized_kl_decomposition(&[((1.0, 2.0), (1.0, 2.0)); 4]).unwrap();
        assert!(same.joint_kl.abs() < 1e-15 && same.sum_of_1d_kls == 0.0);
    }
}
