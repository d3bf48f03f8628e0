use crate::error::{Error, Result};
use crate::prior::{ExpertPdf, GridPdf, SIGMA_FLOOR};
use crate::tensor::{Tape, Tensor, Var};

/// Stand-in for empty bins of the second density of a gridded KL.
pub const Q_FLOOR: f64 = 1e-12;

fn ln_q(q: f64) -> f64 {
    if q > 0.0 {
        q.ln()
    } else {
        Q_FLOOR.ln()
    }
}

/// `KL(N(mu_s, sigma_s) || N(mu_t, sigma_t))` in closed form.
pub fn kl_gaussian(mu_s: f64, sigma_s: f64, mu_t: f64, sigma_t: f64) -> Result<f64> {
    if ![mu_s, sigma_s, mu_t, sigma_t].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("kl_gaussian input".into()));
    }
    if sigma_s < SIGMA_FLOOR || sigma_t < SIGMA_FLOOR {
        return Err(Error::invalid(format!("kl_gaussian sigmas ({sigma_s}, {sigma_t}) below the floor")));
    }
    let d = mu_s - mu_t;
    Ok((sigma_t / sigma_s).ln() + (sigma_s * sigma_s + d * d) / (2.0 * sigma_t * sigma_t) - 0.5)
}

/// Riemann-sum `sum_j p_j ln(p_j / q_j) du` on a shared grid. Tabulated
/// log-densities are used where present; otherwise empty `q` bins are replaced
/// by [`Q_FLOOR`].
pub fn kl_grid(p: &GridPdf, q: &GridPdf) -> Result<f64> {
    if !p.same_grid(q) {
        return Err(Error::invalid("kl_grid needs identical grids"));
    }
    let sum: f64 = (0..p.n_bins())
        .filter(|&j| p.densities[j] > 0.0)
        .map(|j| {
            let lq = if q.log_densities.is_some() { q.ln_density(j) } else { ln_q(q.densities[j]) };
            p.densities[j] * (p.ln_density(j) - lq)
        })
        .sum();
    Ok(sum * p.du())
}

/// KL between two experts of the same kind.
pub fn kl_pdf(p: &ExpertPdf, q: &ExpertPdf) -> Result<f64> {
    match (p, q) {
        (ExpertPdf::Gaussian { mu: ms, sigma: ss }, ExpertPdf::Gaussian { mu: mt, sigma: st }) => {
            kl_gaussian(*ms, *ss, *mt, *st)
        }
        (ExpertPdf::Grid(a), ExpertPdf::Grid(b)) => kl_grid(a, b),
        _ => Err(Error::invalid("KL between a Gaussian and a grid expert")),
    }
}

/// Per-channel Gaussian KL on the tape: source moments are constants, the test
/// mean and variance `[C]` carry gradients. The variance is floored at `SIGMA_FLOOR^2`.
pub fn kl_gaussian_tape(tape: &mut Tape, mu_s: &[f64], sigma_s: &[f64], mu_t: Var, var_t: Var) -> Result<Var> {
    let c = mu_s.len();
    if sigma_s.len() != c || tape.shape(mu_t) != [c] || tape.shape(var_t) != [c] {
        return Err(Error::shape("kl_gaussian_tape: moment vectors differ in length"));
    }
    let v = tape.clamp_min(var_t, SIGMA_FLOOR * SIGMA_FLOOR);
    let ln_v = tape.ln(v);
    let half_ln_v = tape.scale(ln_v, 0.5);
    let ms = tape.constant(Tensor::from_vec(mu_s.to_vec()));
    let d = tape.sub(mu_t, ms)?;
    let d2 = tape.square(d);
    let vs = tape.constant(Tensor::from_vec(sigma_s.iter().map(|s| s * s).collect()));
    let num = tape.add(d2, vs)?;
    let frac = tape.div(num, v)?;
    let frac = tape.scale(frac, 0.5);
    let sum = tape.add(half_ln_v, frac)?;
    let offset = tape.constant(Tensor::from_vec(sigma_s.iter().map(|s| -s.ln() - 0.5).collect()));
    tape.add(sum, offset)
}

/// Gridded KL on the tape where the test density is the normalized version of
/// unnormalized kernel sums `sums` `[n_bins]` on `p`'s grid.
pub fn kl_grid_tape(tape: &mut Tape, p: &GridPdf, sums: Var) -> Result<Var> {
    let n = p.n_bins();
    if tape.shape(sums) != [n] {
        return Err(Error::shape(format!("kl_grid_tape: {:?} sums for {n} bins", tape.shape(sums))));
    }
    let du = p.du();
    let mass = tape.value(sums).sum() * du;
    let q = if mass > 0.0 {
        let total = tape.sum(sums);
        let total = tape.scale(total, du);
        tape.div(sums, total)?
    } else {
        tape.constant(Tensor::full(&[n], 1.0 / (n as f64 * du)))
    };
    let empty: Vec<f64> = tape.value(q).data().iter().map(|v| if *v > 0.0 { 0.0 } else { Q_FLOOR }).collect();
    let empty = tape.constant(Tensor::from_vec(empty));
    let q = tape.add(q, empty)?;
    let ln_q = tape.ln(q);
    let w = tape.constant(Tensor::from_vec(p.densities.iter().map(|d| -d * du).collect()));
    let cross = tape.mul(ln_q, w)?;
    let cross = tape.sum(cross);
    let neg_entropy: f64 = p.densities.iter().filter(|d| **d > 0.0).map(|d| d * d.ln()).sum::<f64>() * du;
    Ok(tape.add_scalar(cross, neg_entropy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::gaussian_grid;

    #[test]
    fn closed_form_examples() {
        assert_eq!(kl_gaussian(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((kl_gaussian(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let expected = (0.5f64).ln() + 4.0 / 2.0 - 0.5;
        assert!((kl_gaussian(0.0, 2.0, 0.0, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.806853).abs() < 1e-6);
        assert!(kl_gaussian(f64::NAN, 1.0, 0.0, 1.0).is_err());
        assert!(kl_gaussian(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn gridded_examples() {
        let g = |mu, s| gaussian_grid(mu, s, -6.0, 7.0, 512).unwrap();
        assert_eq!(kl_grid(&g(0.0, 1.0), &g(0.0, 1.0)).unwrap(), 0.0);
        assert!((kl_grid(&g(0.0, 1.0), &g(1.0, 1.0)).unwrap() - 0.5).abs() < 1e-3);
        let wide = |mu, s| gaussian_grid(mu, s, -12.0, 12.0, 1024).unwrap();
        assert!((kl_grid(&wide(0.0, 2.0), &wide(0.0, 1.0)).unwrap() - 0.8069).abs() < 2e-3);
        let other = gaussian_grid(0.0, 1.0, -6.0, 7.0, 256).unwrap();
        assert!(kl_grid(&g(0.0, 1.0), &other).is_err());
    }

    #[test]
    fn mixed_kinds_are_rejected() {
        let grid = ExpertPdf::Grid(gaussian_grid(0.0, 1.0, -5.0, 5.0, 64).unwrap());
        assert!(kl_pdf(&ExpertPdf::gaussian(0.0, 1.0), &grid).is_err());
    }

    #[test]
    fn grid_kl_converges_as_bins_double() {
        let exact = kl_gaussian(0.0, 1.0, 0.5, 2.0).unwrap();
        let err = |n| {
            let p = gaussian_grid(0.0, 1.0, -12.0, 12.0, n).unwrap();
            let q = gaussian_grid(0.5, 2.0, -12.0, 12.0, n).unwrap();
            (kl_grid(&p, &q).unwrap() - exact).abs()
        };
        // Halves or better until the truncation error of the finite span dominates.
        let errs: Vec<f64> = [8, 16, 32, 64].into_iter().map(err).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] / 2.0 || w[1] < 1e-8), "{errs:?}");
        assert!(errs[3] < 1e-8);
    }

    #[test]
    fn tape_versions_match_plain_values() {
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::from_vec(vec![0.2, -1.0]));
        let var = tape.param(Tensor::from_vec(vec![0.5, 2.0]));
        let kl = kl_gaussian_tape(&mut tape, &[0.0, 1.0], &[1.0, 0.3], mu, var).unwrap();
        let v = tape.value(kl).data().to_vec();
        assert!((v[0] - kl_gaussian(0.0, 1.0, 0.2, 0.5f64.sqrt()).unwrap()).abs() < 1e-14);
        assert!((v[1] - kl_gaussian(1.0, 0.3, -1.0, 2.0f64.sqrt()).unwrap()).abs() < 1e-14);

        let p = gaussian_grid(0.0, 1.0, -6.0, 6.0, 64).unwrap();
        let q = gaussian_grid(0.5, 1.5, -6.0, 6.0, 64).unwrap();
        let sums = tape.param(Tensor::from_vec(q.densities.iter().map(|d| 3.0 * d).collect()));
        let kl = kl_grid_tape(&mut tape, &p, sums).unwrap();
        assert!((tape.value(kl).item().unwrap() - kl_grid(&p, &q).unwrap()).abs() < 1e-13);
    }
}
