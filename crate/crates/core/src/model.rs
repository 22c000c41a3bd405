//! The assembled recommender: frozen encoder features, adapters, MoME,
//! gates, position prompts and the tiny decoder, with batched losses and
//! greedy inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{CandidatePool, Catalog};
use crate::encoders::{adapt_on_tape, init_adapter, AdapterSlot, EncoderConfig, FeatureTable, Modality, SEQ_PREFIX};
use crate::error::{invalid, Result};
use crate::mome::{fuse_rows, init_mome, MoMEConfig, StackLayout};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::promptlm::{
    apply_gate_on_tape, assemble_prompt, decode, embed_prompt, greedy, init_gates, init_lm, logits_at, Answer, GateKind,
    HybridPrompt, LmConfig, PromptMode, Vocab,
};
use crate::rng::seeded;
use crate::spae::{compose_on_tape, init_ppl, PptInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoders: EncoderConfig,
    pub mome: MoMEConfig,
    pub lm: LmConfig,
    pub gate: GateKind,
    /// Rows of the position prompt table.
    pub n_max: usize,
    pub pool_size: usize,
    /// Add position prompts to history slots.
    pub ppl: bool,
    /// Include the proxy block in prompts.
    pub ppt: bool,
    /// Keep the proxy block in evaluation prompts (only meaningful with `ppt`).
    pub eval_proxy: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoders: EncoderConfig::default(),
            mome: MoMEConfig::default(),
            lm: LmConfig::default(),
            gate: GateKind::Tanh,
            n_max: 20,
            pool_size: 5,
            ppl: true,
            ppt: true,
            eval_proxy: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mome.validate()?;
        self.lm.validate()?;
        if self.n_max == 0 || self.pool_size == 0 {
            return Err(crate::Error::Config("n_max and pool_size must be positive".into()));
        }
        Ok(())
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub history: Vec<u32>,
    pub pool: CandidatePool,
    pub ppt: Option<PptInstance>,
}

/// Loss weights for the proxy answer and the item index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ppt: f64,
    pub primary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ppt: 1.0, primary: 1.0 }
    }
}

/// Which modality rows enter the stack, and which are replaced by zeros.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stack {
    pub modalities: Vec<Modality>,
    pub zeroed: Vec<Modality>,
}

impl Stack {
    pub fn of(modalities: &[Modality]) -> Self {
        Self {
            modalities: modalities.to_vec(),
            zeroed: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpeederModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    /// Every weight, including the frozen sequential encoder.
    pub params: ParamStore,
    pub features: FeatureTable,
}

pub fn adapter_dims(cfg: &ModelConfig) -> [(AdapterSlot, usize, usize); 4] {
    let d_f = cfg.mome.d_f;
    [
        (AdapterSlot::Modality(Modality::Text), cfg.encoders.text_dim, d_f),
        (AdapterSlot::Modality(Modality::Vision), cfg.encoders.vision_dim, d_f),
        (AdapterSlot::Modality(Modality::Sequential), cfg.encoders.seq.dim, d_f),
        (AdapterSlot::Fusion, d_f, cfg.lm.d),
    ]
}

const STREAM_MODEL: u64 = 31;

impl SpeederModel {
    /// Fresh trainable weights around frozen encoder outputs.
    pub fn init(cfg: ModelConfig, catalog: &Catalog, features: FeatureTable, seq_store: &ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::new(cfg.n_max.max(cfg.pool_size), catalog.title_vocab);
        let mut params = ParamStore::new();
        for (name, t) in seq_store.iter() {
            params.insert(name, t.clone());
        }
        let mut rng = seeded(seed, &[STREAM_MODEL, 0]);
        for (slot, i, o) in adapter_dims(&cfg) {
            init_adapter(&mut params, slot, i, o, &mut rng);
        }
        let mut rng = seeded(seed, &[STREAM_MODEL, 1]);
        init_mome(&mut params, &cfg.mome, &mut rng)?;
        init_gates(&mut params, cfg.mome.d_f);
        init_ppl(&mut params, cfg.n_max, cfg.lm.d);
        let mut rng = seeded(seed, &[STREAM_MODEL, 2]);
        init_lm(&mut params, &cfg.lm, vocab.len(), &mut rng)?;
        for name in params.names().filter(|n| n.starts_with(SEQ_PREFIX)).map(String::from).collect::<Vec<_>>() {
            params.freeze(&name);
        }
        Ok(Self {
            cfg,
            vocab,
            params,
            features,
        })
    }

    /// Copies pretrained decoder weights over the fresh ones and freezes them.
    pub fn install_base(&mut self, base: &ParamStore) -> Result<()> {
        for (name, t) in base.iter() {
            let slot = self.params.get_mut(name).ok_or_else(|| crate::Error::UnknownParam(name.to_string()))?;
            if slot.shape() != t.shape() {
                return Err(crate::Error::Shape { op: "install_base", lhs: slot.shape().to_vec(), rhs: t.shape().to_vec() });
            }
            *slot = t.clone();
            self.params.freeze(name);
        }
        Ok(())
    }

    pub fn prompt(&self, catalog: Option<&Catalog>, s: &Sample) -> Result<HybridPrompt> {
        self.prompt_with(catalog, s, self.cfg.ppt)
    }

    fn prompt_with(&self, catalog: Option<&Catalog>, s: &Sample, proxy: bool) -> Result<HybridPrompt> {
        let ppt = if proxy { s.ppt.as_ref() } else { None };
        if proxy && ppt.is_none() {
            return Err(invalid("proxy block enabled but sample has no proxy instance"));
        }
        assemble_prompt(&self.vocab, catalog, &s.history, &s.pool, ppt, PromptMode::Speeder, self.cfg.pool_size, 20)
    }

    /// `e^mm` rows for `items` on `tape`, in the order given.
    pub fn fuse_items<'p>(&'p self, tape: &mut Tape<'p>, items: &[u32], stack: &Stack) -> Result<Var> {
        let n = self.features.items();
        if let Some(bad) = items.iter().find(|i| **i as usize >= n) {
            return Err(crate::Error::UnknownItem(*bad));
        }
        let rows_idx: Vec<usize> = items.iter().map(|i| *i as usize).collect();
        let mut parts = Vec::with_capacity(stack.modalities.len());
        for &m in &stack.modalities {
            if stack.zeroed.contains(&m) {
                parts.push(tape.constant(Tensor::zeros(&[items.len(), self.cfg.mome.d_f])));
                continue;
            }
            let table = tape.constant_ref(self.features.of(m));
            let raw = tape.gather_rows(table, &rows_idx)?;
            let a = adapt_on_tape(tape, AdapterSlot::Modality(m), raw)?;
            parts.push(match m {
                Modality::Text => a,
                _ => apply_gate_on_tape(tape, self.cfg.gate, m, a)?,
            });
        }
        let rows = tape.concat_rows(&parts)?;
        let layout = StackLayout::modality_major(&stack.modalities, items.len())?;
        fuse_rows(tape, &self.cfg.mome, rows, &layout)
    }

    /// Mean over `batch` of the weighted target negative log-likelihood.
    pub fn batch_loss<'p>(&'p self, tape: &mut Tape<'p>, batch: &[Sample], stack: &Stack, w: LossWeights) -> Result<Var> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let mut groups: BTreeMap<u32, usize> = BTreeMap::new();
        for s in batch {
            let ppt_items = s.ppt.iter().flat_map(|p| p.items);
            for it in s.history.iter().chain(&s.pool.candidates).copied().chain(ppt_items) {
                let g = groups.len();
                groups.entry(it).or_insert(g);
            }
        }
        let mut items = vec![0u32; groups.len()];
        for (it, g) in &groups {
            items[*g] = *it;
        }
        let e_mm = self.fuse_items(tape, &items, stack)?;
        let group_of = |it: u32| groups.get(&it).copied().ok_or(crate::Error::UnknownItem(it));
        let mut losses = Vec::with_capacity(batch.len());
        for s in batch {
            let p = self.prompt(None, s)?;
            let hist_rows: Vec<usize> = s.history.iter().map(|i| groups[i]).collect();
            let composed = self.compose(tape, e_mm, &hist_rows)?;
            let inputs = embed_prompt(tape, &p, &p.targets[..p.targets.len() - 1], Some(e_mm), Some(composed), &group_of)?;
            let h = decode(tape, &self.cfg.lm, inputs)?;
            let rows: Vec<usize> = (0..p.targets.len()).map(|k| p.len() - 1 + k).collect();
            let logits = logits_at(tape, h, &rows)?;
            let targets: Vec<usize> = p.targets.iter().map(|t| *t as usize).collect();
            let mut weights = vec![w.primary; targets.len()];
            if p.has_proxy {
                weights[0] = w.ppt;
            }
            losses.push(tape.cross_entropy(logits, &targets, &weights)?);
        }
        let mut total = losses[0];
        for l in &losses[1..] {
            total = tape.add(total, *l)?;
        }
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    fn compose(&self, tape: &mut Tape, e_mm: Var, hist_rows: &[usize]) -> Result<Var> {
        let hist = tape.gather_rows(e_mm, hist_rows)?;
        if self.cfg.ppl {
            compose_on_tape(tape, hist)
        } else {
            Ok(hist)
        }
    }

    /// `e^mm` for the whole catalog, `[items, d]`.
    pub fn fused_table(&self, stack: &Stack) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.params);
        let items: Vec<u32> = (0..self.features.items() as u32).collect();
        let v = self.fuse_items(&mut tape, &items, stack)?;
        Ok(tape.value(v).clone())
    }

    /// Greedy answer for one sample given a pre-computed fused table.
    pub fn answer(&self, fused: &Tensor, s: &Sample) -> Result<Answer> {
        let p = self.prompt_with(None, s, self.cfg.ppt && self.cfg.eval_proxy)?;
        let mut tape = Tape::inference(&self.params);
        let table = tape.constant_ref(fused);
        let hist_rows: Vec<usize> = s.history.iter().map(|i| *i as usize).collect();
        let composed = self.compose(&mut tape, table, &hist_rows)?;
        let n = fused.rows();
        let group_of = |it: u32| {
            if (it as usize) < n {
                Ok(it as usize)
            } else {
                Err(crate::Error::UnknownItem(it))
            }
        };
        let mut answer = Answer {
            tokens: Vec::new(),
            proxy: None,
            index: None,
        };
        let mut fed: Vec<u32> = Vec::new();
        for step in 0..p.targets.len() {
            let inputs = embed_prompt(&mut tape, &p, &fed, Some(table), Some(composed), &group_of)?;
            let h = decode(&mut tape, &self.cfg.lm, inputs)?;
            let logits = logits_at(&mut tape, h, &[p.len() - 1 + step])?;
            let row = tape.value(logits).data().to_vec();
            let tok = greedy(&row);
            answer.tokens.push(tok);
            let is_last = step + 1 == p.targets.len();
            if !is_last {
                answer.proxy = match tok {
                    Some(t) if t == self.vocab.yes() => Some(true),
                    Some(t) if t == self.vocab.no() => Some(false),
                    _ => None,
                };
                // Continue from the best-scoring token even when the step was
                // invalid so the index is still decoded.
                let fallback = crate::corpus::argmax(row.iter().copied()) as u32;
                fed.push(tok.unwrap_or(fallback));
            } else {
                answer.index = tok.and_then(|t| self.vocab.index_of(t)).filter(|k| (1..=self.cfg.pool_size).contains(k));
            }
        }
        Ok(answer)
    }
}
