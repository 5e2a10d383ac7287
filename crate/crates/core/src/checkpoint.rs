//! Versioned JSON checkpoints: network configuration, every layer as a
//! shape-tagged array, and optionally the optimizer state and loss history
//! needed to resume training.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cloud::write_atomic;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::network::{Layer, NetConfig, Network, NetworkParams};
use crate::trainer::{AdamState, TrainState};

pub const FORMAT: &str = "normup-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    path: String,
    fan_in: usize,
    fan_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: NetConfig,
    layers: Vec<LayerRecord>,
    #[serde(default)]
    optimizer: Option<AdamState>,
    #[serde(default)]
    epochs_done: usize,
    #[serde(default)]
    history: Vec<[f64; 6]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<AdamState>,
    pub epochs_done: usize,
    pub history: Vec<LossReport>,
}

impl Checkpoint {
    pub fn from_network(network: Network) -> Self {
        Self { network, optimizer: None, epochs_done: 0, history: Vec::new() }
    }

    pub fn from_state(state: &TrainState) -> Self {
        Self {
            network: state.network.clone(),
            optimizer: Some(state.adam.clone()),
            epochs_done: state.epochs_done,
            history: state.history.clone(),
        }
    }

    /// Resumable training state; a checkpoint without optimizer state
    /// restarts the moments from zero.
    pub fn into_state(self) -> TrainState {
        let adam = self.optimizer.unwrap_or_else(|| AdamState::for_params(self.network.params()));
        TrainState { network: self.network, adam, epochs_done: self.epochs_done, history: self.history }
    }

    pub fn to_json(&self) -> Result<String> {
        let (config, params) = (self.network.config().clone(), self.network.params());
        let layers = params
            .layers()
            .iter()
            .map(|(path, l)| LayerRecord {
                path: path.clone(),
                fan_in: l.weight.rows(),
                fan_out: l.weight.cols(),
                weight: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect();
        let file = CheckpointFile {
            format: FORMAT.to_string(),
            version: VERSION,
            config,
            layers,
            optimizer: self.optimizer.clone(),
            epochs_done: self.epochs_done,
            history: self.history.iter().map(|r| r.values()).collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Parses and validates the full dimension chain against the stored
    /// configuration.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", file.format)));
        }
        if file.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", file.version)));
        }
        let mut layers = std::collections::BTreeMap::new();
        for rec in file.layers {
            let weight = Tensor::new(rec.fan_in, rec.fan_out, rec.weight)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", rec.path)))?;
            let bias =
                Tensor::new(1, rec.fan_out, rec.bias).map_err(|e| Error::Checkpoint(format!("{}: {e}", rec.path)))?;
            if layers.insert(rec.path.clone(), Layer { weight, bias }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate layer {}", rec.path)));
            }
        }
        let network = Network::new(file.config, NetworkParams::from_layers(layers))?;
        if let Some(opt) = &file.optimizer {
            opt.validate(network.params())?;
        }
        let history = file
            .history
            .into_iter()
            .map(|v| LossReport {
                total: v[0],
                cd: v[1],
                point_knn: v[2],
                normal: v[3],
                normal_orth: v[4],
                normal_knn: v[5],
            })
            .collect();
        Ok(Self { network, optimizer: file.optimizer, epochs_done: file.epochs_done, history })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
