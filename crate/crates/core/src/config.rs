use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Git-style content hash: SHA-256 over `"blob <len>\0"` followed by the
/// canonical JSON encoding of `value`, hex encoded.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let body = serde_json::to_vec(value)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(&body);
    Ok(hex::encode(h.finalize()))
}

/// Every tunable of a command-line run. Missing JSON fields take defaults.
/// Evaluation heads train with the `finetune` section.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Run seed; propagated to model initialisation and every training stage.
    pub seed: u64,
    pub dataset: crate::specgen::DatasetConfig,
    pub encoder: crate::encoder::EncoderConfig,
    pub pretrain: crate::objectives::PretrainConfig,
    pub finetune: crate::objectives::FinetuneConfig,
    pub router: crate::moe::RouterTrainConfig,
    pub eval: crate::eval::EvalSettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Copy the run seed into the stage configurations.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.router.seed = self.seed;
        self.eval.seed = self.seed;
        self.eval.finetune = self.finetune.clone();
        self.encoder.validate()?;
        Ok(self)
    }

    pub fn hash(&self) -> Result<String> {
        content_hash(self)
    }
}
