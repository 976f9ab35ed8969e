//! The application configuration: every tunable of every stage in one JSON
//! document, validated as a whole, plus content-addressed artifact names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::harness::TrackingSetup;
use crate::kinematics::RobotGeometry;
use crate::nn::NetConfig;
use crate::planner::PlanConfig;
use crate::plant::DisturbanceProfile;
use crate::training::{DatasetConfig, LossWeights, TrainConfig};

/// Name accepted in place of a config path for the built-in defaults.
pub const DEFAULT_NAME: &str = "default";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Root of every artifact directory below; `--out` replaces it.
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub datasets: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            root: PathBuf::from("artifacts"),
            checkpoints: PathBuf::from("checkpoints"),
            datasets: PathBuf::from("datasets"),
            reports: PathBuf::from("reports"),
        }
    }
}

impl Paths {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join(&self.checkpoints)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join(&self.datasets)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join(&self.reports)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Drives data generation, network initialization and batch order;
    /// `--seed` replaces it.
    pub master: u64,
    /// Noise seeds of the benchmark runs.
    pub eval: Vec<u64>,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            master: 1,
            eval: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    /// Simulation rate.
    pub tick_hz: f64,
    /// Rate of state messages to clients.
    pub broadcast_hz: f64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            port: 8731,
            tick_hz: 50.0,
            broadcast_hz: 30.0,
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tick_hz.is_finite() && self.tick_hz > 0.0 && self.broadcast_hz > 0.0 && self.broadcast_hz <= self.tick_hz;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("serve needs 0 < broadcast_hz <= tick_hz".into()))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub geometry: RobotGeometry,
    pub disturbance: DisturbanceProfile,
    pub loss: LossWeights,
    pub network: NetConfig,
    pub dataset: DatasetConfig,
    pub training: TrainConfig,
    pub controller: ControllerConfig,
    pub planner: PlanConfig,
    pub tracking: TrackingSetup,
    pub serve: ServeConfig,
    pub paths: Paths,
    pub seeds: Seeds,
}

impl AppConfig {
    /// Reads `source`, or returns the defaults for [`DEFAULT_NAME`].
    pub fn load(source: &str) -> Result<Self> {
        let cfg = if source == DEFAULT_NAME {
            AppConfig::default()
        } else {
            let text = std::fs::read_to_string(source)
                .map_err(|e| Error::Config(format!("cannot read {source}: {e}")))?;
            Self::from_json(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let sections: [(&str, Result<()>); 9] = [
            ("geometry", self.geometry.validate()),
            ("disturbance", self.disturbance.validate()),
            ("loss", self.loss.validate()),
            ("network", self.network.validate()),
            ("dataset", self.dataset.validate()),
            ("training", self.training.validate()),
            ("controller", self.controller.validate()),
            ("planner", self.planner.validate()),
            ("serve", self.serve.validate()),
        ];
        for (name, r) in sections {
            r.map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.tracking.steps < 4 {
            return Err(Error::Config("tracking: needs at least 4 steps".into()));
        }
        if self.seeds.eval.is_empty() {
            return Err(Error::Config("seeds: eval list is empty".into()));
        }
        Ok(())
    }

    /// Hash of everything a dataset depends on.
    pub fn dataset_key(&self) -> String {
        digest(&[
            to_value(&self.geometry),
            to_value(&self.disturbance),
            to_value(&self.dataset),
            self.seeds.master.into(),
        ])
    }

    /// Hash of everything a trained checkpoint depends on.
    pub fn model_key(&self) -> String {
        digest(&[
            self.dataset_key().into(),
            to_value(&self.loss),
            to_value(&self.network),
            to_value(&self.training),
        ])
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths
            .dataset_dir()
            .join(format!("dataset-{}-s{}.csv", self.dataset_key(), self.seeds.master))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint_dir()
            .join(format!("model-{}-s{}.json", self.model_key(), self.seeds.master))
    }

    /// Training log stored next to its checkpoint.
    pub fn training_log_path(&self) -> PathBuf {
        self.checkpoint_path().with_extension("log.csv")
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config section serializes")
}

/// First 12 hex digits of the SHA-256 of the canonical JSON of `parts`.
fn digest(parts: &[serde_json::Value]) -> String {
    let text = serde_json::to_string(parts).expect("values serialize");
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(6).map(|b| format!("{b:02x}")).collect()
}
