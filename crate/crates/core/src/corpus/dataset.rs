//! On-disk dataset layout (one directory):
//!
//! - `catalog.jsonl`   — one [`Item`](super::Item) per line, ordered by id
//! - `sequences.jsonl` — `{"index", "split", "sequence", "next_item"}` per line
//! - `pools.jsonl`     — `{"index", "candidates", "positive_index"}` per line
//! - `manifest.json`   — seed, rule, counts, generator config and its hash

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::catalog::{generate_catalog, Catalog, CatalogConfig, Item};
use super::pools::{sample_candidate_pool, CandidatePool};
use super::sequences::{generate_sequences, Example, Rule, SequenceConfig};
use crate::config::canonical_hash;
use crate::error::{invalid, Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn id(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// train : valid : test
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            ratios: [0.7, 0.2, 0.1],
            seed,
        }
    }

    /// Assigns each of `count` sequences to a split. Sizes are
    /// `round(count·r_train)`, `round(count·r_valid)`, remainder.
    pub fn assign(&self, count: usize) -> Result<Vec<Split>> {
        let total: f64 = self.ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::Config(format!("split ratios {:?} must sum to 1", self.ratios)));
        }
        let n_train = (count as f64 * self.ratios[0]).round() as usize;
        let n_valid = ((count as f64 * self.ratios[1]).round() as usize).min(count - n_train);
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut seeded(self.seed, &[STREAM_SPLIT]));
        let mut out = vec![Split::Test; count];
        for (rank, idx) in order.into_iter().enumerate() {
            out[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
        Ok(out)
    }
}

const STREAM_SPLIT: u64 = 21;
const STREAM_POOL: u64 = 22;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub rule: Rule,
    pub seqs: usize,
    pub pool_size: usize,
    pub catalog: CatalogConfig,
    pub sequences: SequenceConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            rule: Rule::LatentMatch,
            seqs: 2000,
            pool_size: 5,
            catalog: CatalogConfig::default(),
            sequences: SequenceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// `None` for ingested logs.
    pub rule: Option<Rule>,
    pub items: usize,
    pub seqs: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub pool_size: usize,
    pub n_max: usize,
    pub title_vocab: usize,
    pub vision_dim: usize,
    pub config_hash: String,
    #[serde(default)]
    pub generator: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub catalog: Catalog,
    pub examples: Vec<Example>,
    pub splits: Vec<Split>,
    pub pools: Vec<CandidatePool>,
}

impl Dataset {
    /// Splits and fixed pools for ingested or generated examples. Pool `i`
    /// depends only on `(seed, split(i), i)`.
    pub fn assemble(
        catalog: Catalog,
        examples: Vec<Example>,
        rule: Option<Rule>,
        pool_size: usize,
        seed: u64,
        generator: serde_json::Value,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(invalid("dataset has no sequences"));
        }
        let splits = SplitSpec::new(seed).assign(examples.len())?;
        let pools = examples
            .iter()
            .zip(&splits)
            .enumerate()
            .map(|(i, (ex, split))| {
                let mut rng = seeded(seed, &[STREAM_POOL, split.id(), i as u64]);
                sample_candidate_pool(&ex.sequence.items, ex.next_item, catalog.len(), pool_size, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let count = |s: Split| splits.iter().filter(|x| **x == s).count();
        let manifest = Manifest {
            format_version: 1,
            seed,
            rule,
            items: catalog.len(),
            seqs: examples.len(),
            train: count(Split::Train),
            valid: count(Split::Valid),
            test: count(Split::Test),
            pool_size,
            n_max: examples.iter().map(|e| e.sequence.items.len()).max().unwrap_or(0),
            title_vocab: catalog.title_vocab,
            vision_dim: catalog.vision_dim,
            config_hash: canonical_hash(&(&generator, seed, pool_size))?,
            generator,
        };
        Ok(Self {
            manifest,
            catalog,
            examples,
            splits,
            pools,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len()).filter(|i| self.splits[*i] == split).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_jsonl(dir.join("catalog.jsonl"), self.catalog.items.iter())?;
        write_jsonl(
            dir.join("sequences.jsonl"),
            self.examples.iter().zip(&self.splits).enumerate().map(|(index, (ex, split))| SequenceRecord {
                index,
                split: *split,
                sequence: ex.sequence.clone(),
                next_item: ex.next_item,
            }),
        )?;
        write_jsonl(
            dir.join("pools.jsonl"),
            self.pools.iter().enumerate().map(|(index, p)| PoolRecord {
                index,
                candidates: p.candidates.clone(),
                positive_index: p.positive_index,
            }),
        )?;
        let mut f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
        let items: Vec<Item> = read_jsonl(dir.join("catalog.jsonl"))?;
        let catalog = Catalog::new(items, manifest.title_vocab, manifest.vision_dim)?;
        let seqs: Vec<SequenceRecord> = read_jsonl(dir.join("sequences.jsonl"))?;
        let pools: Vec<PoolRecord> = read_jsonl(dir.join("pools.jsonl"))?;
        if seqs.len() != manifest.seqs || pools.len() != seqs.len() {
            return Err(invalid(format!(
                "manifest says {} sequences, files hold {} sequences and {} pools",
                manifest.seqs,
                seqs.len(),
                pools.len()
            )));
        }
        for (i, (s, p)) in seqs.iter().zip(&pools).enumerate() {
            if s.index != i || p.index != i {
                return Err(invalid(format!("record {i} out of order")));
            }
            if p.positive_index >= p.candidates.len() || p.candidates[p.positive_index] != s.next_item {
                return Err(invalid(format!("pool {i} does not contain its positive")));
            }
            for id in s.sequence.items.iter().chain(&p.candidates) {
                catalog.get(*id)?;
            }
        }
        Ok(Self {
            manifest,
            catalog,
            splits: seqs.iter().map(|s| s.split).collect(),
            examples: seqs
                .into_iter()
                .map(|s| Example {
                    sequence: s.sequence,
                    next_item: s.next_item,
                })
                .collect(),
            pools: pools
                .into_iter()
                .map(|p| CandidatePool {
                    candidates: p.candidates,
                    positive_index: p.positive_index,
                })
                .collect(),
        })
    }
}

/// Catalog, sequences, split and pools for a synthetic corpus.
pub fn generate_dataset(cfg: &CorpusConfig, seed: u64) -> Result<Dataset> {
    let catalog = generate_catalog(&cfg.catalog, cfg.pool_size, seed)?;
    let examples = generate_sequences(&catalog, cfg.rule, &cfg.sequences, cfg.seqs, seed)?;
    Dataset::assemble(catalog, examples, Some(cfg.rule), cfg.pool_size, seed, serde_json::to_value(cfg)?)
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    index: usize,
    split: Split,
    sequence: super::InteractionSequence,
    next_item: u32,
}

#[derive(Serialize, Deserialize)]
struct PoolRecord {
    index: usize,
    candidates: Vec<u32>,
    positive_index: usize,
}

fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
