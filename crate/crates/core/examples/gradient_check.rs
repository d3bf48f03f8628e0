//! Finite-difference checks: a convolution on the tape, then the full
//! matching-loss gradient with respect to the normalization parameters.

use foe_tta::bench::checks::gradient_check;
use foe_tta::tensor::{check_gradients, Tape, Tensor, Var};

fn main() -> foe_tta::Result<()> {
    let x = Tensor::new(vec![1, 2, 5, 5], (0..50).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect())?;
    let w = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect())?;
    let b = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
    let report = check_gradients(&[x, w, b], 1e-6, 1e-6, |tape: &mut Tape, v: &[Var]| {
        let y = tape.conv2d(v[0], v[1], v[2])?;
        let y = tape.square(y);
        let y = tape.scale(y, -0.1);
        let y = tape.exp(y);
        Ok(tape.sum(y))
    })?;
    println!(
        "conv, square, exp: {}/{} coordinates within 1e-6 relative, max relative error {:.2e}",
        report.within_rel, report.coordinates, report.max_rel_err
    );

    let c = gradient_check(0)?;
    println!("{}: {} (passed: {})", c.name, c.detail, c.passed);
    Ok(())
}
