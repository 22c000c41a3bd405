use serde::{Deserialize, Serialize};

use crate::corpus::Item;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::rng::{normal, seeded, splitmix64};

/// Mean of per-token hash embeddings. Token `t` maps to a fixed vector
/// whose coordinates are uniform on `[-√3, √3]` (unit variance), derived
/// from `(seed, t, j)` alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: u32) -> Vec<f64> {
        let base = splitmix64(self.seed ^ splitmix64(token as u64 + 1));
        (0..self.dim)
            .map(|j| {
                let u = splitmix64(base ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)) >> 11;
                (u as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * 3f64.sqrt()
            })
            .collect()
    }

    pub fn encode(&self, item: &Item) -> Result<Vec<f64>> {
        if item.title_tokens.is_empty() {
            return Err(invalid(format!("item {} has no title tokens", item.item_id)));
        }
        let mut out = vec![0.0; self.dim];
        for t in &item.title_tokens {
            for (o, v) in out.iter_mut().zip(self.token_vector(*t)) {
                *o += v;
            }
        }
        let n = item.title_tokens.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }
}

/// Fixed random projection `y = x R`. When `in_dim ≤ out_dim` the rows of
/// `R` are orthonormal, so `‖y‖ = ‖x‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub proj: Tensor,
}

impl VisionEncoder {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, &[0x5649_5349]);
        let (short, long) = (in_dim.min(out_dim), in_dim.max(out_dim));
        // Gram–Schmidt over `short` Gaussian vectors in R^long.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
        while basis.len() < short {
            let mut v: Vec<f64> = (0..long).map(|_| normal(&mut rng)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut data = vec![0.0; in_dim * out_dim];
        for i in 0..in_dim {
            for j in 0..out_dim {
                data[i * out_dim + j] = if in_dim <= out_dim { basis[i][j] } else { basis[j][i] };
            }
        }
        Self {
            proj: Tensor::new(vec![in_dim, out_dim], data).expect("sized"),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.proj.cols()
    }

    pub fn encode(&self, item: &Item) -> Result<Vec<f64>> {
        let x = &item.vision_feature;
        if x.len() != self.in_dim() {
            return Err(crate::Error::Shape {
                op: "encode_vision",
                lhs: vec![x.len()],
                rhs: self.proj.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; self.out_dim()];
        for (i, xi) in x.iter().enumerate() {
            for (o, r) in out.iter_mut().zip(self.proj.row_slice(i)) {
                *o += xi * r;
            }
        }
        Ok(out)
    }
}
