use crate::error::{Error, Result};
use crate::tensor::ops::kde_support;

/// Lower bound on Gaussian expert standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-4;
pub const DEFAULT_BINS: usize = 256;
pub const MIN_BINS: usize = 32;
/// Half-width of a KDE grid in units of the channel's standard deviation.
pub const GRID_HALF_WIDTH: f64 = 5.0;

/// Density tabulated at the centers of `densities.len()` equal bins on `[u_min, u_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPdf {
    pub u_min: f64,
    pub u_max: f64,
    pub densities: Vec<f64>,
    /// Exact natural logs of `densities` for analytic tables, whose far tails
    /// underflow to zero in `densities`.
    pub log_densities: Option<Vec<f64>>,
}

impl GridPdf {
    pub fn new(u_min: f64, u_max: f64, densities: Vec<f64>) -> Result<Self> {
        if !(u_min.is_finite() && u_max.is_finite() && u_max > u_min) {
            return Err(Error::invalid(format!("bad grid span [{u_min}, {u_max}]")));
        }
        if densities.is_empty() || densities.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::invalid("grid densities must be finite and non-negative"));
        }
        Ok(Self { u_min, u_max, densities, log_densities: None })
    }

    /// A table given by its log-densities.
    pub fn from_log_densities(u_min: f64, u_max: f64, log_densities: Vec<f64>) -> Result<Self> {
        if log_densities.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::invalid("log-densities must be below +inf and not NaN"));
        }
        let mut g = Self::new(u_min, u_max, log_densities.iter().map(|l| l.exp()).collect())?;
        g.log_densities = Some(log_densities);
        Ok(g)
    }

    /// `ln` of bin `j`, exact when log-densities are tabulated.
    pub fn ln_density(&self, j: usize) -> f64 {
        match &self.log_densities {
            Some(l) => l[j],
            None => self.densities[j].ln(),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.densities.len()
    }

    pub fn du(&self) -> f64 {
        (self.u_max - self.u_min) / self.n_bins() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        bin_centers(self.u_min, self.u_max, self.n_bins())
    }

    pub fn riemann_sum(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.du()
    }

    pub fn same_grid(&self, other: &GridPdf) -> bool {
        self.u_min == other.u_min && self.u_max == other.u_max && self.n_bins() == other.n_bins()
    }

    /// Rescales so the Riemann sum is 1. Fails on an all-zero grid.
    pub fn normalized(mut self) -> Result<Self> {
        let mass = self.riemann_sum();
        if !(mass > 0.0) {
            return Err(Error::invalid("grid density has no mass"));
        }
        self.densities.iter_mut().for_each(|d| *d /= mass);
        if let Some(l) = self.log_densities.as_mut() {
            let ln_mass = mass.ln();
            l.iter_mut().for_each(|v| *v -= ln_mass);
        }
        Ok(self)
    }
}

pub fn bin_centers(u_min: f64, u_max: f64, n_bins: usize) -> Vec<f64> {
    let du = (u_max - u_min) / n_bins as f64;
    (0..n_bins).map(|j| u_min + (j as f64 + 0.5) * du).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExpertPdf {
    Gaussian { mu: f64, sigma: f64 },
    Grid(GridPdf),
}

impl ExpertPdf {
    /// Gaussian with `sigma` raised to [`SIGMA_FLOOR`].
    pub fn gaussian(mu: f64, sigma: f64) -> Self {
        ExpertPdf::Gaussian { mu, sigma: sigma.max(SIGMA_FLOOR) }
    }

    pub fn as_grid(&self) -> Option<&GridPdf> {
        match self {
            ExpertPdf::Grid(g) => Some(g),
            ExpertPdf::Gaussian { .. } => None,
        }
    }
}

/// Population mean and variance of a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

impl Moments {
    pub fn std(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }

    pub fn to_pdf(self) -> ExpertPdf {
        ExpertPdf::gaussian(self.mean, self.std())
    }
}

/// Two-level moments: the mean of per-group means, and the mean over groups of
/// each group's mean squared deviation from that global mean. Equal to the
/// pooled population moments when all groups have the same size.
pub fn grouped_moments<'a, I>(groups: I) -> Result<Moments>
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let mut n = 0usize;
    let mut mean_sum = 0.0;
    for g in groups.clone() {
        if g.is_empty() {
            return Err(Error::invalid("empty group in moment computation"));
        }
        mean_sum += g.iter().sum::<f64>() / g.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no groups for moment computation"));
    }
    let mean = mean_sum / n as f64;
    let var = groups
        .into_iter()
        .map(|g| g.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / g.len() as f64)
        .sum::<f64>()
        / n as f64;
    Ok(Moments { mean, var })
}

/// Pooled population moments.
pub fn moments(samples: &[f64]) -> Result<Moments> {
    grouped_moments(std::iter::once(samples))
}

/// Silverman bandwidth turned into the kernel coefficient `alpha = 1/(2h^2)`,
/// `h = 1.06 sigma n^(-1/5)`.
pub fn silverman_alpha(sigma: f64, n: usize) -> f64 {
    let h = 1.06 * sigma.max(SIGMA_FLOOR) * (n.max(1) as f64).powf(-0.2);
    1.0 / (2.0 * h * h)
}

/// Grid span `[mu - 5 sigma, mu + 5 sigma]`, widened to `mu +- 1` when sigma is floored.
pub fn default_span(m: Moments) -> (f64, f64) {
    let s = m.std();
    if s <= SIGMA_FLOOR {
        (m.mean - 1.0, m.mean + 1.0)
    } else {
        (m.mean - GRID_HALF_WIDTH * s, m.mean + GRID_HALF_WIDTH * s)
    }
}

/// Every `stride`-th sample so that at most `cap` remain.
pub fn stride_subsample(samples: &[f64], cap: usize) -> Vec<f64> {
    let stride = samples.len().div_ceil(cap.max(1)).max(1);
    samples.iter().step_by(stride).copied().collect()
}

/// Unnormalized kernel sums `S_j = sum_i exp(-alpha (g_j - u_i)^2)` at grid points `g`.
pub fn kde_sums(samples: &[f64], grid: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for &u in samples {
        let (lo, hi) = kde_support(grid, u, alpha);
        for j in lo..hi {
            let d = grid[j] - u;
            out[j] += (-alpha * d * d).exp();
        }
    }
    out
}

/// Gaussian KDE tabulated on `[u_min, u_max]` and renormalized to unit Riemann sum.
/// When the kernel is too narrow to reach any bin center the samples are
/// histogrammed into their nearest bins instead.
pub fn kde_grid(samples: &[f64], u_min: f64, u_max: f64, n_bins: usize, alpha: f64) -> Result<GridPdf> {
    if n_bins < MIN_BINS {
        return Err(Error::invalid(format!("kde needs at least {MIN_BINS} bins, got {n_bins}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("kde alpha must be positive"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("kde of an empty sample set"));
    }
    let centers = bin_centers(u_min, u_max, n_bins);
    let mut s = kde_sums(samples, &centers, alpha);
    if s.iter().all(|v| *v == 0.0) {
        for u in samples {
            s[nearest_bin(*u, u_min, u_max, n_bins)] += 1.0;
        }
    }
    GridPdf::new(u_min, u_max, s)?.normalized()
}

fn nearest_bin(u: f64, u_min: f64, u_max: f64, n_bins: usize) -> usize {
    let j = ((u - u_min) / (u_max - u_min) * n_bins as f64).floor();
    j.clamp(0.0, (n_bins - 1) as f64) as usize
}

/// A Gaussian density sampled at bin centers and renormalized, with exact
/// log-densities. A Gaussian too narrow to register at any bin center becomes a
/// point mass in the nearest bin.
pub fn gaussian_grid(mu: f64, sigma: f64, u_min: f64, u_max: f64, n_bins: usize) -> Result<GridPdf> {
    if n_bins == 0 {
        return Err(Error::invalid("grid needs at least one bin"));
    }
    let ln_c = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let logs: Vec<f64> =
        bin_centers(u_min, u_max, n_bins).into_iter().map(|u| ln_c - 0.5 * ((u - mu) / sigma).powi(2)).collect();
    let g = GridPdf::from_log_densities(u_min, u_max, logs)?;
    if g.densities.iter().all(|v| *v == 0.0) {
        let mut d = vec![0.0; n_bins];
        d[nearest_bin(mu, u_min, u_max, n_bins)] = 1.0;
        return GridPdf::new(u_min, u_max, d)?.normalized();
    }
    g.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn two_slices_hand_example() {
        let m = grouped_moments([&[0.0, 0.0][..], &[1.0, 1.0][..]]).unwrap();
        assert_eq!(m.mean, 0.5);
        assert_eq!(m.var, 0.25);
        assert_eq!(m.to_pdf(), ExpertPdf::Gaussian { mu: 0.5, sigma: 0.5 });
    }

    #[test]
    fn constant_channel_is_floored() {
        let m = grouped_moments([&[3.0; 4][..], &[3.0; 4][..]]).unwrap();
        assert_eq!(m.to_pdf(), ExpertPdf::Gaussian { mu: 3.0, sigma: SIGMA_FLOOR });
        assert_eq!(default_span(m), (2.0, 4.0));
    }

    #[test]
    fn grouped_equals_pooled_for_equal_groups() {
        let data: Vec<f64> = (0..60).map(|i| ((i * 7919) % 61) as f64 * 0.1 - 2.0).collect();
        let grouped = grouped_moments(data.chunks(12)).unwrap();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
        assert!((grouped.mean - mean).abs() < 1e-12);
        assert!((grouped.var - var).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(moments(&[]).is_err());
        assert!(grouped_moments(std::iter::empty::<&[f64]>()).is_err());
        assert!(kde_grid(&[], 0.0, 1.0, 64, 1.0).is_err());
        assert!(kde_grid(&[0.5], 0.0, 1.0, 16, 1.0).is_err());
    }

    #[test]
    fn single_sample_peaks_at_its_bin() {
        let g = kde_grid(&[0.3], -1.0, 1.0, 200, 500.0).unwrap();
        let peak = g.densities.iter().enumerate().fold((0, 0.0), |b, (i, d)| if *d > b.1 { (i, *d) } else { b }).0;
        assert_eq!(peak, ((0.3 + 1.0) / g.du()) as usize);
        assert!((g.riemann_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kde_of_normal_samples_matches_normal_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = moments(&xs).unwrap();
        let (lo, hi) = default_span(m);
        let g = kde_grid(&xs, lo, hi, DEFAULT_BINS, silverman_alpha(m.std(), xs.len())).unwrap();
        let sup = g
            .centers()
            .iter()
            .zip(&g.densities)
            .map(|(u, d)| (d - (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
            .fold(0.0, f64::max);
        assert!(sup < 0.05, "sup-norm {sup}");
    }

    #[test]
    fn degenerate_kernels_fall_back_to_point_masses() {
        let k = kde_grid(&[0.0; 5], -1.0, 1.0, 64, 1e12).unwrap();
        let g = gaussian_grid(0.0, SIGMA_FLOOR, -1.0, 1.0, 64).unwrap();
        assert_eq!(k, g);
        assert_eq!(g.densities.iter().filter(|d| **d > 0.0).count(), 1);
    }

    #[test]
    fn subsample_respects_cap() {
        let xs: Vec<f64> = (0..25_000).map(f64::from).collect();
        let s = stride_subsample(&xs, 10_000);
        assert!(s.len() <= 10_000 && s.len() > 8_000);
        assert_eq!(s[1] - s[0], 3.0);
        assert_eq!(stride_subsample(&xs[..10], 100).len(), 10);
    }
}
