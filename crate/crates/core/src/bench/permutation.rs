use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Two-sided paired sign-flip permutation test on the mean difference `a - b`.
///
/// All `2^n` sign assignments are enumerated when `2^n <= n_perm`. Otherwise
/// `n_perm - 1` random assignments are drawn and the identity is counted once,
/// so the p-value is at least `1 / n_perm`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("permutation test needs at least two pairs"));
    }
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be positive"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    let n = d.len();
    let observed = d.iter().sum::<f64>().abs();
    // Sums are compared, not means; the slack absorbs reordering error.
    let tol = 1e-12 * d.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    let extreme = |signs: &dyn Fn(usize) -> bool| {
        let s: f64 = d.iter().enumerate().map(|(i, v)| if signs(i) { -v } else { *v }).sum();
        s.abs() >= observed - tol
    };
    if n < usize::BITS as usize && (1usize << n) <= n_perm {
        let total = 1usize << n;
        let hits = (0..total).filter(|mask| extreme(&|i| mask >> i & 1 == 1)).count();
        return Ok(hits as f64 / total as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 1usize;
    for _ in 1..n_perm {
        let flips: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        if extreme(&|i| flips[i]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_perm as f64)
}
