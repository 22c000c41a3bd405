use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{normal, seeded};

/// One catalog entry. `latent_attr` and `color` exist only for synthetic
/// catalogs; ingested items leave them empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: u32,
    pub title_tokens: Vec<u32>,
    pub vision_feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub latent_attr: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatalogConfig {
    pub size: usize,
    pub latent_dim: usize,
    pub vision_dim: usize,
    pub title_vocab: usize,
    pub title_len: usize,
    pub colors: usize,
    /// Std-dev of the isotropic noise added to the projected latent.
    pub vision_noise: f64,
    /// Inverse temperature of the latent-conditioned title word distribution.
    pub text_sharpness: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            size: 500,
            latent_dim: 8,
            vision_dim: 32,
            title_vocab: 200,
            title_len: 20,
            colors: 5,
            vision_noise: 0.3,
            text_sharpness: 2.0,
        }
    }
}

impl CatalogConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.size < pool_size + 1 {
            return Err(invalid(format!("catalog size {} must exceed pool size {pool_size}", self.size)));
        }
        if self.latent_dim == 0 || self.vision_dim == 0 || self.title_vocab == 0 || self.title_len == 0 {
            return Err(invalid("catalog dims must be positive"));
        }
        if self.colors == 0 || self.colors > u8::MAX as usize {
            return Err(invalid("colors must be in 1..=255"));
        }
        if !(self.vision_noise >= 0.0 && self.text_sharpness.is_finite()) {
            return Err(invalid("vision_noise must be ≥ 0 and text_sharpness finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub items: Vec<Item>,
    pub title_vocab: usize,
    pub vision_dim: usize,
}

impl Catalog {
    /// Item ids are dense: `items[i].item_id == i`.
    pub fn new(items: Vec<Item>, title_vocab: usize, vision_dim: usize) -> Result<Self> {
        for (i, it) in items.iter().enumerate() {
            if it.item_id as usize != i {
                return Err(invalid(format!("item at {i} has id {}", it.item_id)));
            }
            if it.title_tokens.is_empty() {
                return Err(invalid(format!("item {i} has an empty title")));
            }
            if it.vision_feature.len() != vision_dim {
                return Err(invalid(format!("item {i} vision dim {} ≠ {vision_dim}", it.vision_feature.len())));
            }
            if let Some(t) = it.title_tokens.iter().find(|t| **t as usize >= title_vocab) {
                return Err(invalid(format!("item {i} token {t} outside vocab {title_vocab}")));
            }
        }
        Ok(Self {
            items,
            title_vocab,
            vision_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: u32) -> Result<&Item> {
        self.items.get(id as usize).ok_or(Error::UnknownItem(id))
    }

    pub fn has_latents(&self) -> bool {
        self.items.iter().all(|i| !i.latent_attr.is_empty() && i.color.is_some())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

const STREAM_LATENT: u64 = 1;
const STREAM_PROJECTION: u64 = 2;
const STREAM_WORDS: u64 = 3;
const STREAM_COLORS: u64 = 4;
const STREAM_ITEM: u64 = 5;

/// Latents are `N(0, I_k)`. Vision features are `P z + σ ε` with a fixed
/// Gaussian `P`; title words are drawn with `p(w) ∝ exp(β ⟨u_w, z⟩/√k)`;
/// the color is the prototype with the largest inner product.
pub fn generate_catalog(cfg: &CatalogConfig, pool_size: usize, seed: u64) -> Result<Catalog> {
    cfg.validate(pool_size)?;
    let k = cfg.latent_dim;
    let gauss = |rng: &mut crate::rng::Rng, n: usize| (0..n).map(|_| normal(rng)).collect::<Vec<f64>>();

    let mut rng = seeded(seed, &[STREAM_PROJECTION]);
    let proj: Vec<Vec<f64>> = (0..cfg.vision_dim)
        .map(|_| gauss(&mut rng, k).into_iter().map(|x| x / (k as f64).sqrt()).collect())
        .collect();
    let mut rng = seeded(seed, &[STREAM_WORDS]);
    let words: Vec<Vec<f64>> = (0..cfg.title_vocab).map(|_| gauss(&mut rng, k)).collect();
    let mut rng = seeded(seed, &[STREAM_COLORS]);
    let protos: Vec<Vec<f64>> = (0..cfg.colors).map(|_| gauss(&mut rng, k)).collect();

    let items = (0..cfg.size)
        .map(|i| {
            let mut rng = seeded(seed, &[STREAM_LATENT, i as u64]);
            let z = gauss(&mut rng, k);
            let mut rng = seeded(seed, &[STREAM_ITEM, i as u64]);
            let vision_feature = proj
                .iter()
                .map(|p| p.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + cfg.vision_noise * normal(&mut rng))
                .collect();
            let logits: Vec<f64> = words
                .iter()
                .map(|u| cfg.text_sharpness * u.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / (k as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dist = WeightedIndex::new(logits.iter().map(|l| (l - max).exp())).map_err(|e| Error::Invalid(e.to_string()))?;
            let title_tokens = (0..cfg.title_len).map(|_| dist.sample(&mut rng) as u32).collect();
            let color = argmax(protos.iter().map(|p| p.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())) as u8;
            Ok(Item {
                item_id: i as u32,
                title_tokens,
                vision_feature,
                latent_attr: z,
                color: Some(color),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Catalog::new(items, cfg.title_vocab, cfg.vision_dim)
}

/// Index of the largest value; the earliest index wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = CatalogConfig {
            size: 100,
            ..Default::default()
        };
        let a = generate_catalog(&cfg, 5, 7).unwrap();
        let b = generate_catalog(&cfg, 5, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.items.iter().all(|i| i.vision_feature.len() == 32 && i.title_tokens.len() == 20));
        assert_ne!(a, generate_catalog(&cfg, 5, 8).unwrap());
    }

    #[test]
    fn pairwise_latent_cosines_follow_isotropic_law() {
        // For isotropic Gaussian latents in k dims the cosine of two
        // independent draws has mean 0 and variance 1/k.
        let cfg = CatalogConfig {
            size: 400,
            ..Default::default()
        };
        let c = generate_catalog(&cfg, 5, 3).unwrap();
        let mut cos = Vec::new();
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                cos.push(cosine(&c.items[i].latent_attr, &c.items[j].latent_attr));
            }
        }
        let n = cos.len() as f64;
        let mean = cos.iter().sum::<f64>() / n;
        let var = cos.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0 / 8.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn too_small_catalog_is_rejected() {
        let cfg = CatalogConfig {
            size: 5,
            ..Default::default()
        };
        assert!(generate_catalog(&cfg, 5, 1).is_err());
    }

    #[test]
    fn every_color_is_used() {
        let c = generate_catalog(&CatalogConfig::default(), 5, 1).unwrap();
        let mut seen = [0usize; 5];
        for i in &c.items {
            seen[i.color.unwrap() as usize] += 1;
        }
        assert!(seen.iter().all(|s| *s > 20), "{seen:?}");
    }
}
