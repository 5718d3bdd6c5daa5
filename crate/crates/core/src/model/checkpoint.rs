//! JSON checkpoints: named tensors with shape headers and a version tag.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Critic, NetConfig, Network, Policy};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "atpo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format `{format}` version {version}")]
    Version { format: String, version: u32 },
    #[error("tensor `{name}`: expected {expected} values for shape {shape:?}, found {found}")]
    Shape { name: String, shape: Vec<usize>, expected: usize, found: usize },
    #[error("missing tensor `{0}`")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDump {
    pub config: NetConfig,
    pub tensors: Vec<TensorDump>,
}

impl NetDump {
    pub fn from_network(net: &Network) -> Self {
        let c = &net.config;
        let shapes =
            [vec![c.vocab_size, c.embed_dim], vec![c.hidden, c.input_dim()], vec![c.hidden], vec![c.out_dim, c.hidden], vec![c.out_dim]];
        let tensors = net
            .layout()
            .blocks()
            .into_iter()
            .zip(shapes)
            .map(|((name, r), shape)| TensorDump { name: name.to_string(), shape, data: net.params[r].to_vec() })
            .collect();
        NetDump { config: *c, tensors }
    }

    pub fn to_network(&self) -> Result<Network, CheckpointError> {
        let mut net = Network::zeros(self.config);
        for (name, range) in net.layout().blocks() {
            let t = self.tensors.iter().find(|t| t.name == name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
            let expected: usize = t.shape.iter().product();
            if expected != range.len() || t.data.len() != expected {
                return Err(CheckpointError::Shape {
                    name: name.into(),
                    shape: t.shape.clone(),
                    expected: range.len(),
                    found: t.data.len(),
                });
            }
            net.params[range].copy_from_slice(&t.data);
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub vocab: Vocabulary,
    pub policy: NetDump,
    pub critic: Option<NetDump>,
    pub critic_h: Option<usize>,
}

impl Checkpoint {
    pub fn new(step: u64, vocab: Vocabulary, policy: &Policy, critic: Option<&Critic>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step,
            vocab,
            policy: NetDump::from_network(&policy.net),
            critic: critic.map(|c| NetDump::from_network(&c.net)),
            critic_h: critic.map(|c| c.h),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { format: ck.format, version: ck.version });
        }
        Ok(ck)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn policy(&self) -> Result<Policy, CheckpointError> {
        Ok(Policy { net: self.policy.to_network()? })
    }

    pub fn critic(&self) -> Result<Option<Critic>, CheckpointError> {
        match (&self.critic, self.critic_h) {
            (Some(d), Some(h)) => Ok(Some(Critic { net: d.to_network()?, h })),
            _ => Ok(None),
        }
    }
}
