use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::mpo::TrainConfig;
use crate::promptlm::PretrainConfig;

/// SHA-256 of the canonical JSON form (object keys sorted), hex-encoded.
/// Stable under key reordering of the source document.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_string(&v)?.as_bytes())))
}

/// Everything a pipeline run depends on. Missing sections take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.pool_size != self.corpus.pool_size {
            return Err(Error::Config(format!(
                "model pool_size {} differs from corpus pool_size {}",
                self.model.pool_size, self.corpus.pool_size
            )));
        }
        if self.model.n_max < self.corpus.sequences.n_max {
            return Err(Error::Config(format!(
                "model n_max {} is below the longest history {}",
                self.model.n_max, self.corpus.sequences.n_max
            )));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("train needs batch_size ≥ 1 and lr > 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_toml_str("seed = 3\n[train]\nlr = 0.001\nbatch_size = 8\n").unwrap();
        let b = RunConfig::from_toml_str("[train]\nbatch_size = 8\nlr = 0.001\n[corpus]\n").unwrap();
        let b = RunConfig { seed: 3, ..b };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { seed: 4, ..a.clone() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn toml_round_trip() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml_str(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_and_inconsistent_sections_are_rejected() {
        assert!(RunConfig::from_toml_str("sede = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[corpus]\npool_size = 7\n").is_err());
    }
}
