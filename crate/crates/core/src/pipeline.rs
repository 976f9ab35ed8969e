//! The data → training → checkpoint chain, keyed by configuration hash so
//! an artifact is reused only by the configuration that produced it.

use std::path::PathBuf;

use crate::config::AppConfig;
use crate::nn::{load_checkpoint, save_checkpoint, SpatioCoupledNet};
use crate::training::{generate_dataset, read_dataset, train, write_dataset, write_log, TrainOutcome, TrainingSample};
use crate::Result;

/// Generates the configured dataset and writes it to its content-addressed path.
pub fn generate(cfg: &AppConfig) -> Result<(PathBuf, Vec<TrainingSample>)> {
    let data = generate_dataset(&cfg.disturbance, &cfg.geometry, &cfg.dataset, cfg.seeds.master)?;
    let path = cfg.dataset_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_dataset(&data, &path)?;
    Ok((path, data))
}

/// The configured dataset, read from disk when it exists.
pub fn dataset(cfg: &AppConfig) -> Result<Vec<TrainingSample>> {
    let path = cfg.dataset_path();
    if path.exists() {
        read_dataset(&path)
    } else {
        Ok(generate(cfg)?.1)
    }
}

/// Trains a fresh network and stores the best checkpoint and the log. The
/// checkpoint appears under its final name only once training completes.
pub fn train_model(cfg: &AppConfig, data: &[TrainingSample]) -> Result<(PathBuf, TrainOutcome)> {
    let net = SpatioCoupledNet::new(cfg.network.clone(), cfg.geometry.n_segments, cfg.seeds.master)?;
    let path = cfg.checkpoint_path();
    let partial = path.with_extension("partial.json");
    let out = train(data, net, &cfg.loss, &cfg.training, cfg.seeds.master, Some(&partial))?;
    save_checkpoint(&out.net, &path)?;
    let _ = std::fs::remove_file(&partial);
    write_log(&out.log, &cfg.training, &cfg.training_log_path())?;
    Ok((path, out))
}

/// The configured checkpoint; fails with `CheckpointNotFound` if it was
/// never trained.
pub fn load_model(cfg: &AppConfig) -> Result<SpatioCoupledNet> {
    load_checkpoint(&cfg.checkpoint_path())
}

/// The configured checkpoint, generating data and training first if needed.
pub fn ensure_model(cfg: &AppConfig) -> Result<SpatioCoupledNet> {
    match load_model(cfg) {
        Err(crate::Error::CheckpointNotFound(_)) => {
            let data = dataset(cfg)?;
            Ok(train_model(cfg, &data)?.1.net)
        }
        other => other,
    }
}
