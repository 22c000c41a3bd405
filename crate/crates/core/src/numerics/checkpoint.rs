//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SPDRCKPT"
//! version    u32       1
//! meta_len   u32       length of the metadata JSON
//! meta       bytes     UTF-8 JSON object (config_hash, stage, step, extra)
//! count      u32       number of entries
//! entry*     name_len u32, name bytes (UTF-8),
//!            dtype u8 (1 = f64, 2 = f32), flags u8 (bit 0 = frozen),
//!            ndim u8, dims u64 × ndim,
//!            data: product(dims) scalars, little-endian
//! ```
//!
//! Round trips through `f64` entries are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPDRCKPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub stage: u8,
    pub step: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

pub fn write_checkpoint<W: Write>(mut w: W, meta: &CheckpointMeta, params: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_vec(meta)?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64, params.is_frozen(name) as u8, t.shape().len() as u8])?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointMeta, ParamStore)> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let [dtype, flags, ndim]: [u8; 3] = read_exact(&mut r)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let len: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => {
                let mut buf = vec![0u8; len * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            }
            DTYPE_F32 => {
                let mut buf = vec![0u8; len * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            }
            other => return Err(Error::Format(format!("unknown dtype {other} for `{name}`"))),
        };
        store.insert(name.clone(), Tensor::new(shape, data)?);
        if flags & 1 == 1 {
            store.freeze(&name);
        }
    }
    Ok((meta, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, meta: &CheckpointMeta, params: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, meta, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointMeta, ParamStore)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            frozen in any::<bool>(),
            step in any::<u64>(),
        ) {
            let mut store = ParamStore::new();
            store.insert("mome.layer0.mhsa.w_q", Tensor::row(values.clone()));
            store.insert("spae.ppl", Tensor::new(vec![values.len(), 1], values).unwrap());
            if frozen {
                store.freeze("spae.ppl");
            }
            let meta = CheckpointMeta { config_hash: "abc".into(), stage: 2, step, extra: BTreeMap::new() };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &meta, &store).unwrap();
            let (meta2, store2) = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(meta, meta2);
            prop_assert!(store.diff(&store2).is_empty());
            prop_assert_eq!(store2.is_frozen("spae.ppl"), frozen);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&b"NOTACKPT0000"[..]).is_err());
    }
}
