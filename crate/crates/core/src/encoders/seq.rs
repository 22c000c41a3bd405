//! A one-block causal self-attention next-item model used as the frozen
//! sequential encoder.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{init_linear, Adam, AttnMask, LrSchedule, ParamStore, Tape, Tensor, Var};
use crate::rng::seeded;

pub const SEQ_PREFIX: &str = "encoders.seq.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqEncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Longest input window; longer sequences keep their most recent items.
    pub max_len: usize,
}

impl Default for SeqEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 2,
            layers: 1,
            epochs: 5,
            lr: 5e-3,
            batch: 32,
            max_len: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeqEncoder {
    pub cfg: SeqEncoderConfig,
    pub num_items: usize,
    pub store: ParamStore,
}

fn p(name: &str) -> String {
    format!("{SEQ_PREFIX}{name}")
}

impl SeqEncoder {
    pub fn init(num_items: usize, cfg: SeqEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!("seq encoder dim {} / heads {}", cfg.dim, cfg.heads)));
        }
        let mut rng = seeded(seed, &[0x5345_51]);
        let d = cfg.dim;
        let mut s = ParamStore::new();
        let scale = 1.0 / (d as f64).sqrt();
        s.insert(p("item_emb"), Tensor::uniform(&[num_items, d], scale, &mut rng));
        s.insert(p("pos_emb"), Tensor::uniform(&[cfg.max_len, d], scale, &mut rng));
        for l in 0..cfg.layers {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                s.insert(p(&format!("layer{l}.attn.{w}")), init_linear(d, d, &mut rng));
            }
            s.insert(p(&format!("layer{l}.ffn.w1")), init_linear(d, d, &mut rng));
            s.insert(p(&format!("layer{l}.ffn.b1")), Tensor::zeros(&[d]));
            s.insert(p(&format!("layer{l}.ffn.w2")), init_linear(d, d, &mut rng));
            s.insert(p(&format!("layer{l}.ffn.b2")), Tensor::zeros(&[d]));
            for ln in ["ln1", "ln2"] {
                s.insert(p(&format!("layer{l}.{ln}.gamma")), Tensor::full(&[d], 1.0));
                s.insert(p(&format!("layer{l}.{ln}.beta")), Tensor::zeros(&[d]));
            }
        }
        Ok(Self { cfg, num_items, store: s })
    }

    /// Rebuilds from stored parameters (e.g. a checkpoint).
    pub fn from_store(cfg: SeqEncoderConfig, store: ParamStore) -> Result<Self> {
        let num_items = store.require(&p("item_emb"))?.rows();
        let mut store = store;
        store.freeze_all();
        Ok(Self { cfg, num_items, store })
    }

    fn check(&self, items: &[u32]) -> Result<()> {
        match items.iter().find(|i| **i as usize >= self.num_items) {
            Some(i) => Err(Error::UnknownItem(*i)),
            None => Ok(()),
        }
    }

    /// Hidden states `[len, dim]` for an item sequence.
    pub fn hidden(&self, tape: &mut Tape, items: &[u32]) -> Result<Var> {
        self.check(items)?;
        if items.is_empty() || items.len() > self.cfg.max_len {
            return Err(invalid(format!("sequence length {} outside 1..={}", items.len(), self.cfg.max_len)));
        }
        let idx: Vec<usize> = items.iter().map(|i| *i as usize).collect();
        let pos: Vec<usize> = (0..items.len()).collect();
        let emb = tape.param(&p("item_emb"))?;
        let pe = tape.param(&p("pos_emb"))?;
        let e = tape.gather_rows(emb, &idx)?;
        let pe = tape.gather_rows(pe, &pos)?;
        let mut x = tape.add(e, pe)?;
        for l in 0..self.cfg.layers {
            let w = |t: &mut Tape, n: &str| t.param(&p(&format!("layer{l}.{n}")));
            let (wq, wk, wv, wo) = (w(tape, "attn.w_q")?, w(tape, "attn.w_k")?, w(tape, "attn.w_v")?, w(tape, "attn.w_o")?);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let a = tape.attention(q, k, v, self.cfg.heads, &AttnMask::Causal)?;
            let a = tape.matmul(a, wo)?;
            let r = tape.add(x, a)?;
            let (g1, b1) = (w(tape, "ln1.gamma")?, w(tape, "ln1.beta")?);
            let h = tape.layernorm(r, g1, b1)?;
            let (fw1, fb1, fw2, fb2) = (w(tape, "ffn.w1")?, w(tape, "ffn.b1")?, w(tape, "ffn.w2")?, w(tape, "ffn.b2")?);
            let f = tape.affine(h, fw1, fb1)?;
            let f = tape.relu(f);
            let f = tape.affine(f, fw2, fb2)?;
            let r = tape.add(h, f)?;
            let (g2, b2) = (w(tape, "ln2.gamma")?, w(tape, "ln2.beta")?);
            x = tape.layernorm(r, g2, b2)?;
        }
        Ok(x)
    }

    /// Next-item cross-entropy summed over every position of every
    /// sequence, scaled by `weight`.
    fn loss(&self, tape: &mut Tape, seqs: &[&[u32]], weight: f64) -> Result<Var> {
        let mut total = None;
        for s in seqs {
            let (inp, tgt) = (&s[..s.len() - 1], &s[1..]);
            let h = self.hidden(tape, inp)?;
            let emb = tape.param(&p("item_emb"))?;
            let logits = tape.matmul_t(h, emb)?;
            let targets: Vec<usize> = tgt.iter().map(|t| *t as usize).collect();
            let l = tape.cross_entropy(logits, &targets, &vec![weight; targets.len()])?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        total.ok_or_else(|| invalid("empty batch"))
    }

    /// Trains on full sequences (history followed by the next item) and
    /// freezes every parameter. Returns the mean loss per epoch.
    pub fn train(&mut self, sequences: &[Vec<u32>], seed: u64) -> Result<Vec<f64>> {
        let seqs: Vec<&[u32]> = sequences
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| &s[s.len().saturating_sub(self.cfg.max_len + 1)..])
            .collect();
        for s in &seqs {
            self.check(s)?;
        }
        if seqs.is_empty() {
            return Err(invalid("no training sequences for the sequential encoder"));
        }
        let batch = self.cfg.batch.max(1);
        let steps = (seqs.len().div_ceil(batch) * self.cfg.epochs) as u64;
        let mut opt = Adam::new(LrSchedule::new(self.cfg.lr, 0.1, steps));
        let mut history = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..seqs.len()).collect();
            order.shuffle(&mut seeded(seed, &[0x5345_51, epoch as u64]));
            let (mut sum, mut count) = (0.0, 0usize);
            for chunk in order.chunks(batch) {
                let positions: usize = chunk.iter().map(|i| seqs[*i].len() - 1).sum();
                let picked: Vec<&[u32]> = chunk.iter().map(|i| seqs[*i]).collect();
                let grads = {
                    let mut tape = Tape::new(&self.store);
                    let l = self.loss(&mut tape, &picked, 1.0 / positions as f64)?;
                    let v = tape.value(l).data()[0];
                    if !v.is_finite() {
                        return Err(Error::Diverged { stage: 0, epoch });
                    }
                    sum += v * positions as f64;
                    count += positions;
                    tape.backward(l)?
                };
                opt.step(&mut self.store, &grads)?;
            }
            history.push(sum / count as f64);
        }
        self.store.freeze_all();
        Ok(history)
    }

    /// `history = None` returns the item's learned id vector; otherwise the
    /// final hidden state after reading `history` followed by `item`.
    pub fn encode(&self, item: u32, history: Option<&[u32]>) -> Result<Vec<f64>> {
        self.check(&[item])?;
        match history {
            None => Ok(self.store.require(&p("item_emb"))?.row_slice(item as usize).to_vec()),
            Some(h) => {
                let mut seq: Vec<u32> = h.to_vec();
                seq.push(item);
                let start = seq.len().saturating_sub(self.cfg.max_len);
                let mut tape = Tape::inference(&self.store);
                let x = self.hidden(&mut tape, &seq[start..])?;
                let t = tape.value(x);
                Ok(t.row_slice(t.rows() - 1).to_vec())
            }
        }
    }

    pub fn item_table(&self) -> Result<&Tensor> {
        self.store.require(&p("item_emb"))
    }
}
