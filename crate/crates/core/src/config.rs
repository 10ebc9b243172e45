//! Configuration file schema, on-disk KG index, and loading of the shared
//! read-only resources.
//!
//! Example `sake.toml`:
//!
//! ```toml
//! kg_index = "umls.index.json"
//!
//! [encoder]
//! kind = "hash"          # or "table" (path = ...) or "remote" (endpoint, dim)
//! dim = 64
//!
//! [rollout]
//! p = 3
//! max_tokens_per_turn = 1024
//! variant = "full"
//!
//! [reward]
//! s1 = 100
//! s2 = 300
//!
//! [grpo]
//! clip_epsilon = 0.2
//! kl_beta = 0.001
//!
//! [policy]
//! kind = "remote"
//! endpoint = "http://localhost:8000/v1"
//! model = "qwen2.5-7b-instruct"
//!
//! [server]
//! bind = "127.0.0.1:8080"
//! concurrency_limit = 64
//! max_body_bytes = 1048576
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{
    EncodeError, Encoder, EntityIndex, HashEncoder, RemoteEncoder, RemoteEncoderConfig, TableEncoder,
    DEFAULT_TEST_DIM,
};
use crate::grpo::GrpoConfig;
use crate::kg::{KgError, KgSnapshot, KnowledgeGraph};
use crate::policy::{Policy, PolicyError, RemotePolicy, RemotePolicyConfig, ScriptedPolicy};
use crate::reward::RewardSchedule;
use crate::rollout::{KgView, RolloutConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Table {
        path: PathBuf,
    },
    Remote(RemoteEncoderConfig),
}

fn default_dim() -> usize {
    DEFAULT_TEST_DIM
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Hash {
            dim: DEFAULT_TEST_DIM,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn build(&self) -> Result<Arc<dyn Encoder>, EncodeError> {
        Ok(match self {
            EncoderConfig::Hash { dim, seed } => Arc::new(HashEncoder::new(*dim, *seed)),
            EncoderConfig::Table { path } => Arc::new(TableEncoder::from_json_path(path)?),
            EncoderConfig::Remote(cfg) => Arc::new(RemoteEncoder::new(cfg.clone())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Scripted { path: PathBuf },
    Remote(RemotePolicyConfig),
}

impl PolicyConfig {
    pub fn build(&self) -> Result<Arc<dyn Policy>, PolicyError> {
        Ok(match self {
            PolicyConfig::Scripted { path } => Arc::new(ScriptedPolicy::from_json_path(path)?),
            PolicyConfig::Remote(cfg) => Arc::new(RemotePolicy::new(cfg.clone())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerSettings {
    pub bind: String,
    pub concurrency_limit: usize,
    pub max_body_bytes: usize,
    pub auth_token: Option<String>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            concurrency_limit: 64,
            max_body_bytes: 1 << 20,
            auth_token: None,
        }
    }
}

/// Everything a `sake` config file can set. Every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SakeConfig {
    pub kg_index: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub rollout: RolloutConfig,
    pub reward: RewardSchedule,
    pub grpo: GrpoConfig,
    pub policy: Option<PolicyConfig>,
    pub server: ServerSettings,
    /// Worker threads for batch rollouts.
    pub workers: Option<usize>,
}

impl SakeConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg: SakeConfig = toml::from_str(&text).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        // Relative paths inside the file are relative to the file.
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_relative(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = self.kg_index.as_mut() {
            fix(p);
        }
        if let EncoderConfig::Table { path } = &mut self.encoder {
            fix(path);
        }
        if let Some(PolicyConfig::Scripted { path }) = &mut self.policy {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rollout.validate().map_err(ConfigError::Invalid)?;
        self.grpo
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.server.concurrency_limit == 0 || self.server.max_body_bytes == 0 {
            return Err(ConfigError::Invalid("server limits must be positive".into()));
        }
        Ok(())
    }
}

/// On-disk KG index: the triplets plus, optionally, precomputed entity
/// vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KgIndexFile {
    pub version: u32,
    #[serde(flatten)]
    pub graph: KgSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EntityIndex>,
}

impl KgIndexFile {
    pub const VERSION: u32 = 1;

    pub fn new(kg: &KnowledgeGraph, embeddings: Option<EntityIndex>) -> Self {
        Self {
            version: Self::VERSION,
            graph: KgSnapshot::from(kg),
            embeddings,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string(self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let file: KgIndexFile = serde_json::from_str(&text).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if file.version != Self::VERSION {
            return Err(ConfigError::File {
                path: path.to_path_buf(),
                reason: format!("unsupported index version {}", file.version),
            });
        }
        Ok(file)
    }
}

/// The immutable graph, its entity index and the encoder that built it.
#[derive(Clone)]
pub struct Resources {
    pub kg: Arc<KnowledgeGraph>,
    pub index: Arc<EntityIndex>,
    pub encoder: Arc<dyn Encoder>,
}

impl Resources {
    pub fn build(kg: KnowledgeGraph, encoder: Arc<dyn Encoder>) -> Result<Self, ConfigError> {
        let index = EntityIndex::build(&kg, encoder.as_ref())?;
        Ok(Self {
            kg: Arc::new(kg),
            index: Arc::new(index),
            encoder,
        })
    }

    /// Loads an index file, reusing stored vectors when they were built by
    /// an identically configured encoder.
    pub fn load(index_path: &Path, encoder: &EncoderConfig) -> Result<Self, ConfigError> {
        let file = KgIndexFile::load(index_path)?;
        let encoder = encoder.build()?;
        let kg = KnowledgeGraph::from(file.graph);
        match file.embeddings {
            Some(index)
                if index.encoder_fingerprint() == encoder.fingerprint()
                    && index.labels().iter().eq(kg.entities().iter()) =>
            {
                Ok(Self {
                    kg: Arc::new(kg),
                    index: Arc::new(index),
                    encoder,
                })
            }
            _ => Self::build(kg, encoder),
        }
    }

    pub fn view(&self) -> KgView<'_> {
        KgView {
            kg: &self.kg,
            index: &self.index,
            encoder: self.encoder.as_ref(),
        }
    }
}
