//! Closed-form Gaussian KL against its Riemann-sum counterpart, and the two
//! identities relating per-expert and joint divergences.

use foe_tta::divergence::{
    check_factorized_kl_decomposition, check_subject_aggregation_identity, kl_gaussian, kl_grid,
};
use foe_tta::prior::gaussian_grid;

fn main() -> foe_tta::Result<()> {
    println!("{:>6} {:>6} {:>6} {:>6} {:>12} {:>12}", "mu_s", "sig_s", "mu_t", "sig_t", "closed", "grid");
    for (ms, ss, mt, st) in [(0.0, 1.0, 0.0, 1.0), (0.0, 1.0, 1.0, 1.0), (-1.0, 0.5, 2.0, 2.0), (2.5, 2.8, -1.0, 0.25)]
    {
        let lo = f64::min(ms - 6.0 * ss, mt - 6.0 * st);
        let hi = f64::max(ms + 6.0 * ss, mt + 6.0 * st);
        let p = gaussian_grid(ms, ss, lo, hi, 1024)?;
        let q = gaussian_grid(mt, st, lo, hi, 1024)?;
        println!("{ms:>6} {ss:>6} {mt:>6} {st:>6} {:>12.6} {:>12.6}", kl_gaussian(ms, ss, mt, st)?, kl_grid(&p, &q)?);
    }

    let f = check_factorized_kl_decomposition(&[((0.0, 1.0), (0.5, 1.5)), ((1.0, 0.3), (0.0, 0.4))])?;
    println!("\njoint KL {:.12}  sum of 1D KLs {:.12}  gap {:.1e}", f.joint_kl, f.sum_of_1d_kls, f.gap);

    let (lo, hi) = (-10.0, 10.0);
    let subjects = [gaussian_grid(-1.0, 0.7, lo, hi, 2048)?, gaussian_grid(1.0, 1.0, lo, hi, 2048)?];
    let test = gaussian_grid(0.5, 1.2, lo, hi, 2048)?;
    let a = check_subject_aggregation_identity(&subjects, &[0.5, 0.5], &test)?;
    println!(
        "KL(mixture || p_t) = {:.6}  identity rhs = {:.6}  E_s KL(p_s || p_t) = {:.6}",
        a.lhs, a.rhs, a.expected_kl
    );
    Ok(())
}
