//! The whole command sequence on a miniature configuration: data, training,
//! priors, adaptation, evaluation and the report, all in a temporary directory.

use foe_tta::bench::{cmd_build_prior, cmd_evaluate, cmd_make_data, cmd_report, cmd_train, cmd_tta, RunConfig};

const CONFIG: &str = "
image_size = 32
n_slices = 4
n_train = 4
n_val = 1
n_test = 2
n_test_shifted = 2
n_domains = 1
unet_depth = 2
train_iterations = 200
val_every = 100
pca_r = 4
pca_d = 2
pca_g = 4
tta_methods = foe_cnn_pca, entropy_min
tta_lambdas = 0.1, 0
tta_epochs = 20
tta_domains = 0, 1
n_perm = 1000
";

fn main() -> foe_tta::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig::parse(CONFIG, dir.path())?.with_overrides(None, Some(dir.path().to_path_buf()))?;
    cmd_make_data(&cfg, false)?;
    cmd_train(&cfg, false)?;
    cmd_build_prior(&cfg, false)?;
    cmd_tta(&cfg, false)?;
    for c in cmd_evaluate(&cfg)? {
        println!("{:<26} domain {}  strong {:.4} -> {:.4}", c.run_id, c.domain, c.baseline, c.adapted);
    }
    let written = cmd_report(&cfg.out_dir, cfg.n_perm, cfg.seed)?;
    println!("\n{}", std::fs::read_to_string(&written[0])?);
    println!("{} report files", written.len());
    Ok(())
}
