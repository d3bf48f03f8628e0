use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use foe_tta::bench::{self, RunConfig, SelfcheckOptions};

#[derive(Parser)]
#[command(name = "foe-tta", version, about = "Field-of-Experts test-time adaptation on synthetic segmentation data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat `key = value` run config. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing data or recompute up-to-date stages.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and shifted subjects plus a manifest.
    MakeData(Common),
    /// Train the plain and strong baselines.
    Train(Common),
    /// Build per-subject expert priors from the strong baseline.
    BuildPrior(Common),
    /// Adapt the normalization module per test subject.
    Tta(Common),
    /// Score baselines and adapted models; paired permutation tests.
    Evaluate(Common),
    /// Summary tables and SVG plots from the metrics directory.
    Report(Common),
    /// Numerical self-checks; exits nonzero on any failure.
    Selfcheck(Common),
}

fn run(cli: Cli) -> foe_tta::Result<bool> {
    let common = match &cli.command {
        Command::MakeData(c)
        | Command::Train(c)
        | Command::BuildPrior(c)
        | Command::Tta(c)
        | Command::Evaluate(c)
        | Command::Report(c)
        | Command::Selfcheck(c) => c,
    };
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("", &std::env::current_dir()?)?,
    }
    .with_overrides(common.seed, common.out.clone())?;
    let threads = bench::init_thread_pool()?;
    log::info!("{threads} worker threads, run directory {}", cfg.out_dir.display());
    let force = common.force;
    match cli.command {
        Command::MakeData(_) => {
            let dir = bench::cmd_make_data(&cfg, force)?;
            println!("data written to {}", dir.display());
        }
        Command::Train(_) => bench::cmd_train(&cfg, force)?,
        Command::BuildPrior(_) => bench::cmd_build_prior(&cfg, force)?,
        Command::Tta(_) => bench::cmd_tta(&cfg, force)?,
        Command::Evaluate(_) => {
            for c in bench::cmd_evaluate(&cfg)? {
                let p = c.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<32} domain {} n {:>2}  strong {:.4} -> {:.4}  p {p}",
                    c.run_id, c.domain, c.n, c.baseline, c.adapted
                );
            }
        }
        Command::Report(_) => {
            let written = bench::cmd_report(&cfg.out_dir, cfg.n_perm, cfg.seed)?;
            print!("{}", std::fs::read_to_string(&written[0])?);
            for p in &written[1..] {
                println!("wrote {}", p.display());
            }
        }
        Command::Selfcheck(_) => {
            let report = bench::cmd_selfcheck(&cfg.out_dir, &SelfcheckOptions { seed: cfg.seed, kl_offset: 0.0 })?;
            print!("{}", report.to_text());
            println!("summary written to {}", cfg.out_dir.join("selfcheck.json").display());
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
