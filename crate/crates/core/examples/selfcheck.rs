//! Runs the numerical self-checks and prints one line per check.

use foe_tta::bench::{run_selfcheck, SelfcheckOptions};

fn main() -> foe_tta::Result<()> {
    let report = run_selfcheck(&SelfcheckOptions::default())?;
    print!("{}", report.to_text());
    println!("{}", if report.passed() { "all checks passed" } else { "some checks FAILED" });
    Ok(())
}
