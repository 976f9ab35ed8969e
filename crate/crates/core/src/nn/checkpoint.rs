//! Self-describing JSON container for trained weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetConfig, SpatioCoupledNet};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::features::Normalizer;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub n_segments: usize,
    pub config: NetConfig,
    pub gate_bias: f64,
    pub input_norm: Normalizer,
    pub output_scale: [f64; 3],
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_net(net: &SpatioCoupledNet) -> Self {
        let p = net.params();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            n_segments: net.n_segments(),
            config: net.config().clone(),
            gate_bias: net.config().gate_bias,
            input_norm: net.input_norm.clone(),
            output_scale: net.output_scale,
            layers: p
                .names()
                .iter()
                .zip(p.tensors())
                .map(|(name, t)| LayerRecord {
                    name: name.clone(),
                    shape: t.shape(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_net(self) -> Result<SpatioCoupledNet> {
        if self.format_version != CHECKPOINT_FORMAT {
            return Err(invalid(format!("unsupported checkpoint format {}", self.format_version)));
        }
        let mut cfg = self.config;
        cfg.gate_bias = self.gate_bias;
        let mut named = Vec::with_capacity(self.layers.len());
        for l in self.layers {
            if l.data.len() != l.shape[0] * l.shape[1] {
                return Err(invalid(format!("layer {} payload does not match its shape", l.name)));
            }
            named.push((l.name, Tensor::from_vec(l.shape[0], l.shape[1], l.data)));
        }
        SpatioCoupledNet::from_parts(cfg, self.n_segments, named, self.input_norm, self.output_scale)
    }
}

pub fn save_checkpoint(net: &SpatioCoupledNet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(&Checkpoint::from_net(net))?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SpatioCoupledNet> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::CheckpointNotFound(path.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    ck.into_net()
}
