use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use super::checks::{self, CheckResult};
use crate::error::Result;

#[derive(Clone, Debug, Default)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Added to every closed-form Gaussian KL of the grid comparison. Nonzero
    /// values exist to prove that the suite can fail.
    pub kl_offset: f64,
}

#[derive(Clone, Debug)]
pub struct SelfcheckReport {
    pub checks: Vec<(CheckResult, u128)>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(c, _)| c.passed)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let checks: Vec<_> = self
            .checks
            .iter()
            .map(|(c, ms)| {
                json!({
                    "name": c.name,
                    "value": c.value,
                    "tolerance": c.tolerance,
                    "passed": c.passed,
                    "detail": c.detail,
                    "wall_ms": *ms as u64,
                })
            })
            .collect();
        json!({ "format": "foe-tta-selfcheck v1", "passed": self.passed(), "checks": checks })
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|(c, ms)| {
                format!(
                    "{} {:<34} value {:<12.4e} tolerance {:<9.1e} {} ({ms} ms)\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance,
                    c.detail
                )
            })
            .collect()
    }
}

pub fn run_selfcheck(opts: &SelfcheckOptions) -> Result<SelfcheckReport> {
    let mut out = Vec::new();
    let mut timed = |f: &mut dyn FnMut() -> Result<Vec<CheckResult>>| -> Result<()> {
        let t = Instant::now();
        let results = f()?;
        let ms = t.elapsed().as_millis();
        out.extend(results.into_iter().map(|r| (r, ms)));
        Ok(())
    };
    let seed = opts.seed;
    timed(&mut || Ok(vec![checks::kl_grid_vs_closed_form(100, seed, opts.kl_offset)?]))?;
    timed(&mut || Ok(vec![checks::factorized_kl(50, seed)?]))?;
    timed(&mut || {
        let (a, b) = checks::subject_aggregation(50, seed)?;
        Ok(vec![a, b])
    })?;
    timed(&mut || Ok(vec![checks::gradient_check(seed + 1)?]))?;
    timed(&mut || Ok(vec![checks::pca_residuals(20, seed)?]))?;
    timed(&mut || Ok(vec![checks::prior_self_match(seed + 1)?]))?;
    timed(&mut || Ok(vec![checks::permutation_exhaustive()?]))?;
    Ok(SelfcheckReport { checks: out })
}

/// Runs the suite and writes `selfcheck.json` under `out_dir`.
pub fn cmd_selfcheck(out_dir: &Path, opts: &SelfcheckOptions) -> Result<SelfcheckReport> {
    let report = run_selfcheck(opts)?;
    fs::create_dir_all(out_dir)?;
    let body = serde_json::to_string_pretty(&report.to_json()).expect("selfcheck summary serializes");
    fs::write(out_dir.join("selfcheck.json"), body + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_and_injected_kl_fails() {
        let dir = tempfile::tempdir().unwrap();
        let good = cmd_selfcheck(dir.path(), &SelfcheckOptions::default()).unwrap();
        assert!(good.passed(), "{}", good.to_text());
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("selfcheck.json")).unwrap()).unwrap();
        assert_eq!(json["passed"], true);
        for c in json["checks"].as_array().unwrap() {
            assert!(c["name"].is_string() && c["value"].is_number() && c["tolerance"].is_number());
        }

        let bad = run_selfcheck(&SelfcheckOptions { kl_offset: 0.01, ..SelfcheckOptions::default() }).unwrap();
        assert!(!bad.passed());
        let failed: Vec<&str> = bad.checks.iter().filter(|(c, _)| !c.passed).map(|(c, _)| c.name.as_str()).collect();
        assert_eq!(failed, ["kl_grid_vs_closed_form"]);
    }
}
