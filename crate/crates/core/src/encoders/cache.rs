use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use crate::error::{Error, Result};
use crate::numerics::{load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore, Tensor};

/// Pre-computed vectors keyed by `(item, tag)`, each stamped with the
/// weight version it was computed under. Reads take a shared lock; writes
/// are serialized.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(u32, String), (String, Vec<f64>)>>,
    computes: AtomicUsize,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, item: u32, tag: &str, version: &str) -> Option<Vec<f64>> {
        let map = self.entries.read().expect("cache lock");
        match map.get(&(item, tag.to_string())) {
            Some((v, vec)) if v == version => Some(vec.clone()),
            _ => None,
        }
    }

    /// Returns the cached vector when its version matches; otherwise runs
    /// `compute` and stores (or overwrites) the entry.
    pub fn get_or_compute<F>(&self, item: u32, tag: &str, version: &str, compute: F) -> Result<Vec<f64>>
    where
        F: FnOnce() -> Result<Vec<f64>>,
    {
        if let Some(v) = self.get(item, tag, version) {
            return Ok(v);
        }
        let v = compute()?;
        self.computes.fetch_add(1, Ordering::Relaxed);
        self.entries
            .write()
            .expect("cache lock")
            .insert((item, tag.to_string()), (version.to_string(), v.clone()));
        Ok(v)
    }

    /// Number of times a value had to be computed.
    pub fn computes(&self) -> usize {
        self.computes.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored scalars under `tag`.
    pub fn scalar_count(&self, tag: &str) -> usize {
        self.entries
            .read()
            .expect("cache lock")
            .iter()
            .filter(|((_, t), _)| t == tag)
            .map(|(_, (_, v))| v.len())
            .sum()
    }

    pub fn clear(&self) {
        self.entries.write().expect("cache lock").clear();
    }

    /// Persists in the checkpoint container: entry `cache/{tag}/{item}`,
    /// version under metadata key `version/{tag}/{item}`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = self.entries.read().expect("cache lock");
        let mut store = ParamStore::new();
        let mut extra = BTreeMap::new();
        for ((item, tag), (version, v)) in map.iter() {
            if tag.contains('/') {
                return Err(Error::Invalid(format!("cache tag `{tag}` contains '/'")));
            }
            store.insert(format!("cache/{tag}/{item}"), Tensor::row(v.clone()));
            extra.insert(format!("version/{tag}/{item}"), version.clone());
        }
        let meta = CheckpointMeta {
            config_hash: String::new(),
            stage: 0,
            step: 0,
            extra,
        };
        save_checkpoint(path, &meta, &store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, store) = load_checkpoint(path)?;
        let mut map = HashMap::new();
        for (name, t) in store.iter() {
            let rest = name
                .strip_prefix("cache/")
                .ok_or_else(|| Error::Format(format!("unexpected cache entry `{name}`")))?;
            let (tag, item) = rest
                .rsplit_once('/')
                .ok_or_else(|| Error::Format(format!("unexpected cache entry `{name}`")))?;
            let item: u32 = item.parse().map_err(|_| Error::Format(format!("bad item in `{name}`")))?;
            let version = meta
                .extra
                .get(&format!("version/{tag}/{item}"))
                .ok_or_else(|| Error::Format(format!("missing version for `{name}`")))?;
            map.insert((item, tag.to_string()), (version.clone(), t.data().to_vec()));
        }
        Ok(Self {
            entries: RwLock::new(map),
            computes: AtomicUsize::new(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lookup_is_bit_equal_and_skips_compute() {
        let c = EmbeddingCache::new();
        let a = c.get_or_compute(3, "s3", "v1", || Ok(vec![0.1, 0.2 + 1e-17])).unwrap();
        let b = c
            .get_or_compute(3, "s3", "v1", || panic!("must not recompute"))
            .unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(c.computes(), 1);
    }

    #[test]
    fn version_change_recomputes_and_overwrites() {
        let c = EmbeddingCache::new();
        c.get_or_compute(1, "s3", "v1", || Ok(vec![1.0])).unwrap();
        let v = c.get_or_compute(1, "s3", "v2", || Ok(vec![2.0])).unwrap();
        assert_eq!(v, vec![2.0]);
        assert_eq!(c.len(), 1);
        assert_eq!(c.get(1, "s3", "v1"), None);
        assert_eq!(c.computes(), 2);
    }

    #[test]
    fn warm_cache_holds_items_times_dim_per_tag() {
        let c = EmbeddingCache::new();
        for i in 0..100 {
            c.get_or_compute(i, "s2", "v", || Ok(vec![0.5; 64])).unwrap();
            c.get_or_compute(i, "s3", "v", || Ok(vec![0.5; 64])).unwrap();
        }
        assert_eq!(c.scalar_count("s2"), 100 * 64);
        assert_eq!(c.scalar_count("s3"), 100 * 64);
    }

    #[test]
    fn persists_bit_exactly() {
        let c = EmbeddingCache::new();
        c.get_or_compute(7, "s1", "abc", || Ok(vec![std::f64::consts::PI, -0.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        c.save(&path).unwrap();
        let back = EmbeddingCache::load(&path).unwrap();
        let v = back.get(7, "s1", "abc").unwrap();
        assert_eq!(v[0].to_bits(), std::f64::consts::PI.to_bits());
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
    }
}
