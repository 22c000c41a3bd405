use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{init_linear, AttnMask, ParamStore, Tape, Tensor, Var};
use crate::rng::normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub context: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Per-head columns carrying rotary position; the rest are position-free.
    pub rotary_dims: usize,
    pub rope_base: f64,
    /// Start each layer with `w_k = w_q`, so attention initially favours
    /// slots whose content matches the query.
    pub qk_tied_init: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            d_ffn: 256,
            context: 512,
            lora_rank: 4,
            lora_alpha: 8.0,
            rotary_dims: 8,
            rope_base: 100.0,
            qk_tied_init: true,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 || (self.d / self.heads) % 2 != 0 {
            return Err(Error::Config(format!("lm d {} needs an even per-head width for {} heads", self.d, self.heads)));
        }
        let dh = self.d / self.heads;
        if self.rotary_dims == 0 || self.rotary_dims % 2 != 0 || self.rotary_dims > dh {
            return Err(Error::Config(format!("rotary_dims {} must be even and within 2..={dh}", self.rotary_dims)));
        }
        if self.layers == 0 || self.context == 0 {
            return Err(Error::Config("lm needs layers ≥ 1 and context ≥ 1".into()));
        }
        Ok(())
    }
}

pub const LM_PREFIX: &str = "lm.";
pub const TOK_EMB: &str = "lm.tok_emb";
const PROJ: [&str; 4] = ["q", "k", "v", "o"];

/// Base weights (to be frozen) plus LoRA factors `A: r×d` (uniform) and
/// `B: d×r` (zero), so the adapted model starts equal to the base.
pub fn init_lm<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &LmConfig, vocab: usize, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    let std = 1.0 / (d as f64).sqrt();
    let emb: Vec<f64> = (0..vocab * d).map(|_| normal(rng) * std).collect();
    store.insert(TOK_EMB, Tensor::new(vec![vocab, d], emb)?);
    for l in 0..cfg.layers {
        let lp = format!("lm.layer{l}");
        for p in PROJ {
            let w = if p == "k" && cfg.qk_tied_init {
                store.require(&format!("{lp}.attn.w_q"))?.clone()
            } else {
                init_linear(d, d, rng)
            };
            store.insert(format!("{lp}.attn.w_{p}"), w);
            if cfg.lora_rank > 0 {
                store.insert(format!("{lp}.attn.{p}.lora_a"), init_linear(d, cfg.lora_rank, rng).transpose());
                store.insert(format!("{lp}.attn.{p}.lora_b"), Tensor::zeros(&[d, cfg.lora_rank]));
            }
        }
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{lp}.{ln}.gamma"), Tensor::full(&[d], 1.0));
            store.insert(format!("{lp}.{ln}.beta"), Tensor::zeros(&[d]));
        }
        store.insert(format!("{lp}.ffn.w1"), init_linear(d, cfg.d_ffn, rng));
        store.insert(format!("{lp}.ffn.b1"), Tensor::zeros(&[cfg.d_ffn]));
        store.insert(format!("{lp}.ffn.w2"), init_linear(cfg.d_ffn, d, rng));
        store.insert(format!("{lp}.ffn.b2"), Tensor::zeros(&[d]));
    }
    store.insert("lm.ln_f.gamma", Tensor::full(&[d], 1.0));
    store.insert("lm.ln_f.beta", Tensor::zeros(&[d]));
    Ok(())
}

/// Whether `name` is a LoRA factor.
pub fn is_lora(name: &str) -> bool {
    name.starts_with(LM_PREFIX) && (name.ends_with(".lora_a") || name.ends_with(".lora_b"))
}

/// `x W + (α/r)·(x Aᵀ) Bᵀ`.
fn projection(tape: &mut Tape, cfg: &LmConfig, layer: usize, p: &str, x: Var) -> Result<Var> {
    let lp = format!("lm.layer{layer}.attn");
    let w = tape.param(&format!("{lp}.w_{p}"))?;
    let base = tape.matmul(x, w)?;
    if cfg.lora_rank == 0 {
        return Ok(base);
    }
    let a = tape.param(&format!("{lp}.{p}.lora_a"))?;
    let b = tape.param(&format!("{lp}.{p}.lora_b"))?;
    let xa = tape.matmul_t(x, a)?;
    let delta = tape.matmul_t(xa, b)?;
    let delta = tape.scale(delta, cfg.lora_alpha / cfg.lora_rank as f64);
    tape.add(base, delta)
}

fn ln(tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.gamma"))?;
    let b = tape.param(&format!("{prefix}.beta"))?;
    tape.layernorm(x, g, b)
}

/// Pre-LN causal decoder over input rows `[N, d]`; returns the final
/// normalized hidden states.
pub fn decode(tape: &mut Tape, cfg: &LmConfig, inputs: Var) -> Result<Var> {
    let n = tape.value(inputs).rows();
    if n == 0 {
        return Err(invalid("empty prompt"));
    }
    if n > cfg.context {
        return Err(invalid(format!("prompt of {n} slots exceeds context {}", cfg.context)));
    }
    let mut x = inputs;
    for l in 0..cfg.layers {
        let lp = format!("lm.layer{l}");
        let h = ln(tape, &format!("{lp}.ln1"), x)?;
        let q = projection(tape, cfg, l, "q", h)?;
        let k = projection(tape, cfg, l, "k", h)?;
        let v = projection(tape, cfg, l, "v", h)?;
        let q = tape.rope_partial(q, cfg.heads, cfg.rotary_dims / 2, cfg.rope_base)?;
        let k = tape.rope_partial(k, cfg.heads, cfg.rotary_dims / 2, cfg.rope_base)?;
        let a = tape.attention(q, k, v, cfg.heads, &AttnMask::Causal)?;
        let o = projection(tape, cfg, l, "o", a)?;
        x = tape.add(x, o)?;
        let h = ln(tape, &format!("{lp}.ln2"), x)?;
        let (w1, b1) = (tape.param(&format!("{lp}.ffn.w1"))?, tape.param(&format!("{lp}.ffn.b1"))?);
        let (w2, b2) = (tape.param(&format!("{lp}.ffn.w2"))?, tape.param(&format!("{lp}.ffn.b2"))?);
        let f = tape.affine(h, w1, b1)?;
        let f = tape.relu(f);
        let f = tape.affine(f, w2, b2)?;
        x = tape.add(x, f)?;
    }
    ln(tape, "lm.ln_f", x)
}

/// Logits `[|rows|, V]` at the given positions through the tied head.
pub fn logits_at(tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
    let h = tape.gather_rows(hidden, rows)?;
    let emb = tape.param(TOK_EMB)?;
    tape.matmul_t(h, emb)
}
