//! Frozen modality encoders, the trainable modality/fusion adapters, and
//! the pre-computed embedding cache.

mod adapters;
mod cache;
mod seq;
mod stubs;

use serde::{Deserialize, Serialize};

pub use adapters::{adapt, adapt_on_tape, init_adapter, AdapterSlot};
pub use cache::EmbeddingCache;
pub use seq::{SeqEncoder, SeqEncoderConfig, SEQ_PREFIX};
pub use stubs::{TextEncoder, VisionEncoder};

use crate::corpus::Catalog;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
    Sequential,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Vision, Modality::Sequential];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
            Modality::Sequential => "seq",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "vision" => Ok(Modality::Vision),
            "seq" | "sequential" => Ok(Modality::Sequential),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub text_dim: usize,
    pub vision_dim: usize,
    pub seq: SeqEncoderConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            text_dim: 48,
            vision_dim: 48,
            seq: SeqEncoderConfig::default(),
        }
    }
}

/// The three frozen encoders.
#[derive(Clone, Debug)]
pub struct EncoderSuite {
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub seq: SeqEncoder,
}

impl EncoderSuite {
    /// Builds the stubs and pre-trains the sequential encoder on
    /// `train_sequences` (history followed by next item), then freezes it.
    pub fn build(catalog: &Catalog, cfg: &EncoderConfig, train_sequences: &[Vec<u32>], seed: u64) -> Result<Self> {
        let mut seq = SeqEncoder::init(catalog.len(), cfg.seq.clone(), seed)?;
        seq.train(train_sequences, seed)?;
        Ok(Self {
            text: TextEncoder::new(cfg.text_dim, seed),
            vision: VisionEncoder::new(catalog.vision_dim, cfg.vision_dim, seed),
            seq,
        })
    }

    /// Reassembles a suite from a stored sequential encoder.
    pub fn from_parts(catalog: &Catalog, cfg: &EncoderConfig, seq_store: ParamStore, seed: u64) -> Result<Self> {
        Ok(Self {
            text: TextEncoder::new(cfg.text_dim, seed),
            vision: VisionEncoder::new(catalog.vision_dim, cfg.vision_dim, seed),
            seq: SeqEncoder::from_store(cfg.seq.clone(), seq_store)?,
        })
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text.dim,
            Modality::Vision => self.vision.out_dim(),
            Modality::Sequential => self.seq.cfg.dim,
        }
    }

    pub fn encode(&self, catalog: &Catalog, m: Modality, item: u32) -> Result<Vec<f64>> {
        let it = catalog.get(item)?;
        match m {
            Modality::Text => self.text.encode(it),
            Modality::Vision => self.vision.encode(it),
            Modality::Sequential => self.seq.encode(item, None),
        }
    }

    /// Encodes the whole catalog once; encoders are frozen so these rows
    /// are constants for every later stage.
    pub fn features(&self, catalog: &Catalog) -> Result<FeatureTable> {
        let table = |m: Modality| -> Result<Tensor> {
            let d = self.dim(m);
            let mut data = Vec::with_capacity(catalog.len() * d);
            for it in &catalog.items {
                data.extend(self.encode(catalog, m, it.item_id)?);
            }
            Tensor::new(vec![catalog.len(), d], data)
        };
        Ok(FeatureTable {
            text: table(Modality::Text)?,
            vision: table(Modality::Vision)?,
            seq: table(Modality::Sequential)?,
        })
    }
}

/// Per-item encoder outputs `p^text`, `p^vis`, `p^id` as `[items, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub text: Tensor,
    pub vision: Tensor,
    pub seq: Tensor,
}

impl FeatureTable {
    pub fn of(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Text => &self.text,
            Modality::Vision => &self.vision,
            Modality::Sequential => &self.seq,
        }
    }

    pub fn items(&self) -> usize {
        self.text.rows()
    }
}
