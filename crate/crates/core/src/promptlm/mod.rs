//! Hybrid Prompt assembly, the tiny decoder stand-in with LoRA, tanh gates
//! for non-textual modalities, and greedy answer decoding.

mod gate;
mod lm;
mod pretrain;
mod prompt;
mod vocab;

pub use gate::{apply_gate, apply_gate_on_tape, gate_bias, gate_weight, init_gates, GateKind};
pub use lm::{decode, init_lm, is_lora, logits_at, LmConfig, LM_PREFIX, TOK_EMB};
pub use pretrain::{
    pretrain_base, pretrained_base, synthetic_accuracy, synthetic_loss, synthetic_prompt, PretrainConfig, PretrainRecord, ProbeScore, SyntheticPrompt,
    PRETRAIN_POS,
};
pub use prompt::{assemble_prompt, EmbedRole, HybridPrompt, PromptMode, Slot};
pub use vocab::{Vocab, TEMPLATE_WORDS};

use crate::error::{invalid, Result};
use crate::numerics::{Tape, Var};

/// Input rows for `prompt`: token slots read the embedding table, history
/// slots read `composed[pos]`, subset/candidate slots read `e_mm[group(item)]`.
pub fn embed_prompt(
    tape: &mut Tape,
    prompt: &HybridPrompt,
    extra_tokens: &[u32],
    e_mm: Option<Var>,
    composed: Option<Var>,
    group_of: &dyn Fn(u32) -> Result<usize>,
) -> Result<Var> {
    let tok = tape.param(TOK_EMB)?;
    let mut sources = vec![tok];
    let mm_src = e_mm.map(|v| {
        sources.push(v);
        sources.len() - 1
    });
    let comp_src = composed.map(|v| {
        sources.push(v);
        sources.len() - 1
    });
    let mut picks = Vec::with_capacity(prompt.len() + extra_tokens.len());
    for s in &prompt.slots {
        picks.push(match s {
            Slot::Token(t) => (0, *t as usize),
            Slot::Embed {
                role: EmbedRole::History(pos),
                ..
            } => (comp_src.ok_or_else(|| invalid("history slots need composed embeddings"))?, *pos),
            Slot::Embed { item, .. } => (mm_src.ok_or_else(|| invalid("embedding slots need e_mm"))?, group_of(*item)?),
        });
    }
    picks.extend(extra_tokens.iter().map(|t| (0, *t as usize)));
    tape.gather(&sources, picks)
}

/// Outcome of greedy decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Answer {
    /// Decoded tokens; `None` marks a tie at that step.
    pub tokens: Vec<Option<u32>>,
    /// Proxy answer (`Some(true)` = yes) when valid.
    pub proxy: Option<bool>,
    /// Candidate index in `1..=m` when valid.
    pub index: Option<usize>,
}

/// Argmax over one logit row; exact ties or non-finite logits give `None`.
pub fn greedy(row: &[f64]) -> Option<u32> {
    if row.is_empty() || row.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    let ties = row.iter().filter(|v| **v == row[best]).count();
    (ties == 1).then_some(best as u32)
}

#[cfg(test)]
mod tests;
