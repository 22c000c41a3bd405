use std::collections::BTreeSet;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::catalog::{argmax, cosine, Catalog};
use crate::error::{invalid, Error, Result};
use crate::rng::{normal, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Next item is the non-interacted item closest (cosine) to the mean
    /// latent of the last three interactions.
    LatentMatch,
    /// Next item shares the FIRST interaction's color and is, among such
    /// non-interacted items, the closest to it — so order matters.
    PositionalColorMatch,
}

impl std::str::FromStr for Rule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent-match" => Ok(Rule::LatentMatch),
            "positional-color-match" => Ok(Rule::PositionalColorMatch),
            other => Err(Error::Config(format!("unknown rule `{other}`"))),
        }
    }
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rule::LatentMatch => "latent-match",
            Rule::PositionalColorMatch => "positional-color-match",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: u32,
    pub items: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<i64>>,
}

impl InteractionSequence {
    pub fn distinct_items(&self) -> usize {
        self.items.iter().collect::<BTreeSet<_>>().len()
    }
}

/// A history together with its ground-truth next item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub sequence: InteractionSequence,
    pub next_item: u32,
}

impl Rule {
    /// Standalone rule oracle.
    pub fn next_item(self, catalog: &Catalog, history: &[u32]) -> Result<u32> {
        if !catalog.has_latents() {
            return Err(invalid("rule oracles need a synthetic catalog"));
        }
        if history.is_empty() {
            return Err(invalid("empty history"));
        }
        for id in history {
            catalog.get(*id)?;
        }
        let seen: BTreeSet<u32> = history.iter().copied().collect();
        let (target, color): (Vec<f64>, Option<u8>) = match self {
            Rule::LatentMatch => {
                let tail = &history[history.len().saturating_sub(3)..];
                let k = catalog.items[0].latent_attr.len();
                let mut mean = vec![0.0; k];
                for id in tail {
                    for (m, z) in mean.iter_mut().zip(&catalog.items[*id as usize].latent_attr) {
                        *m += z / tail.len() as f64;
                    }
                }
                (mean, None)
            }
            Rule::PositionalColorMatch => {
                let first = &catalog.items[history[0] as usize];
                (first.latent_attr.clone(), first.color)
            }
        };
        let pool: Vec<u32> = catalog
            .items
            .iter()
            .filter(|it| !seen.contains(&it.item_id) && (color.is_none() || it.color == color))
            .map(|it| it.item_id)
            .collect();
        if pool.is_empty() {
            return Err(invalid(format!("rule {self} unsatisfiable for this history")));
        }
        let best = argmax(pool.iter().map(|id| cosine(&catalog.items[*id as usize].latent_attr, &target)));
        Ok(pool[best])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Inverse temperature of the taste-driven item choice (latent-match).
    pub taste_sharpness: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            n_min: 9,
            n_max: 20,
            taste_sharpness: 3.0,
        }
    }
}

const STREAM_SEQUENCE: u64 = 11;
const MAX_ATTEMPTS: usize = 64;

/// Generates `count` examples; example `i` depends only on `(seed, i)`.
pub fn generate_sequences(
    catalog: &Catalog,
    rule: Rule,
    cfg: &SequenceConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    if cfg.n_min < 9 || cfg.n_min > cfg.n_max {
        return Err(Error::Config(format!("n_range [{}, {}] must lie within [9, n_max]", cfg.n_min, cfg.n_max)));
    }
    if catalog.len() < cfg.n_max + 1 {
        return Err(invalid(format!("catalog of {} items cannot host histories of {}", catalog.len(), cfg.n_max)));
    }
    if !catalog.has_latents() {
        return Err(invalid("sequence generation needs a synthetic catalog"));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded(seed, &[STREAM_SEQUENCE, i as u64]);
            let mut last_err = None;
            for _ in 0..MAX_ATTEMPTS {
                let n = rng.gen_range(cfg.n_min..=cfg.n_max);
                let items = match rule {
                    Rule::LatentMatch => taste_walk(catalog, n, cfg.taste_sharpness, &mut rng)?,
                    Rule::PositionalColorMatch => {
                        let ids: Vec<u32> = (0..catalog.len() as u32).collect();
                        ids.choose_multiple(&mut rng, n).copied().collect()
                    }
                };
                match rule.next_item(catalog, &items) {
                    Ok(next_item) => {
                        return Ok(Example {
                            sequence: InteractionSequence {
                                user_id: i as u32,
                                items,
                                timestamps: None,
                            },
                            next_item,
                        })
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            Err(last_err.unwrap_or_else(|| invalid("unsatisfiable rule")))
        })
        .collect()
}

/// Distinct items drawn without replacement with `p ∝ exp(β·cos(z, taste))`.
fn taste_walk(catalog: &Catalog, n: usize, beta: f64, rng: &mut crate::rng::Rng) -> Result<Vec<u32>> {
    let k = catalog.items[0].latent_attr.len();
    let taste: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
    let mut weights: Vec<f64> = catalog
        .items
        .iter()
        .map(|it| (beta * cosine(&it.latent_attr, &taste)).exp())
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Invalid(e.to_string()))?;
        let pick = dist.sample(rng);
        weights[pick] = 0.0;
        out.push(pick as u32);
    }
    Ok(out)
}
