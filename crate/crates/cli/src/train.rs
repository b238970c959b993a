use std::path::{Path, PathBuf};

use umct::trainer::{run_experiment, ExperimentConfig};

use crate::{require_file, CliResult};

pub fn run(config: &Path, out: &Path, source_checkpoints: Vec<PathBuf>, force: bool) -> CliResult {
    require_file(config)?;
    let mut cfg: ExperimentConfig = umct::config::load_toml(config)?;
    if !source_checkpoints.is_empty() {
        cfg.train.source_checkpoints = source_checkpoints;
    }
    for p in &cfg.train.source_checkpoints {
        require_file(p)?;
    }
    cfg.validate()?;
    log::info!("mode {} config {}", cfg.train.mode, &cfg.hash()?[..16]);
    let art = run_experiment(&cfg, out, force)?;
    let s = &art.summary.result;
    log::info!("per-view DSC {:?}, ensemble {:.4}", s.per_view_dsc, s.ensemble_dsc);
    println!("{}", art.run_dir.display());
    Ok(())
}
