use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::actor::{ActorConfig, ActorNetwork};
use crate::critic::{CriticConfig, CriticNetwork};
use crate::error::{Error, Result};
use crate::nn::params::hex;
use crate::nn::{ParamSet, Tensor, TensorFile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Bc,
    Rl,
}

/// Networks plus everything needed to rebuild them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: usize,
    pub env_id: String,
    pub config: TrainConfig,
    pub actor: ActorNetwork,
    pub critic: Option<CriticNetwork>,
    pub target: Option<CriticNetwork>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    stage: Stage,
    step: usize,
    env_id: String,
    config: String,
    actor: ActorConfig,
    critic: Option<CriticConfig>,
}

fn put(out: &mut Vec<(String, Tensor)>, prefix: &str, params: &ParamSet) {
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn take(tensors: &[(String, Tensor)], prefix: &str) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('/')) {
            ps.push(rest, t.clone());
        }
    }
    ps
}

impl Checkpoint {
    pub fn to_tensor_file(&self) -> TensorFile {
        let meta = Meta {
            stage: self.stage,
            step: self.step,
            env_id: self.env_id.clone(),
            config: self.config.to_text(),
            actor: self.actor.config().clone(),
            critic: self.critic.as_ref().map(|c| c.config().clone()),
        };
        let mut tensors = Vec::new();
        put(&mut tensors, "actor", &self.actor.params);
        if let Some(c) = &self.critic {
            put(&mut tensors, "critic", &c.params);
        }
        if let Some(t) = &self.target {
            put(&mut tensors, "target", &t.params);
        }
        TensorFile {
            config: serde_json::to_string(&meta).expect("checkpoint metadata serializes"),
            tensors,
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: Meta =
            serde_json::from_str(&file.config).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let config = TrainConfig::parse(&meta.config)?;
        let actor = ActorNetwork::with_params(meta.actor, take(&file.tensors, "actor"))?;
        let (critic, target) = match meta.critic {
            Some(cc) => (
                Some(CriticNetwork::with_params(cc.clone(), take(&file.tensors, "critic"))?),
                Some(CriticNetwork::with_params(cc, take(&file.tensors, "target"))?),
            ),
            None => (None, None),
        };
        Ok(Self {
            stage: meta.stage,
            step: meta.step,
            env_id: meta.env_id,
            config,
            actor,
            critic,
            target,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_tensor_file().to_bytes()
    }

    /// SHA-256 of the serialized checkpoint, hex.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}
