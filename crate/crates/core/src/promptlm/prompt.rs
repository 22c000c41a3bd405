use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::corpus::{CandidatePool, Catalog};
use crate::error::{invalid, Result};
use crate::spae::PptInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// One index token plus one injected embedding per item.
    Speeder,
    /// One index token plus `title_len − 1` title tokens per item.
    Title,
}

/// What an injected slot carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedRole {
    /// History item at this 0-based position: `e^mm + p_pos`.
    History(usize),
    /// Proxy subset item: raw `e^mm`.
    Subset,
    /// Candidate item: raw `e^mm`.
    Candidate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Token(u32),
    Embed { item: u32, role: EmbedRole },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridPrompt {
    pub slots: Vec<Slot>,
    /// `[proxy answer, index]`, or `[index]` without the proxy block.
    pub targets: Vec<u32>,
    pub mode: PromptMode,
    pub n: usize,
    pub m: usize,
    pub has_proxy: bool,
    pub title_len: usize,
}

impl HybridPrompt {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slots outside the numbered history and candidate items.
    pub fn t0(&self) -> usize {
        self.len() - self.avg_token() * (self.n + self.m)
    }

    pub fn avg_token(&self) -> usize {
        match self.mode {
            PromptMode::Speeder => 2,
            PromptMode::Title => self.title_len,
        }
    }

    pub fn embed_slots(&self) -> impl Iterator<Item = (usize, u32, EmbedRole)> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, s)| match s {
            Slot::Embed { item, role } => Some((i, *item, *role)),
            Slot::Token(_) => None,
        })
    }
}

/// Template:
///
/// ```text
/// <bos> instruction: recommend the next item history:  #1 [e] … #n [e]
/// proxy: [e] [e] [e] is gap(a,b) not-greater than gap(b,c) ?
/// candidates:  #1 [e] … #m [e]
/// output: yes/no index answer:
/// ```
///
/// The proxy line is dropped when `ppt` is `None`. In title mode each `[e]`
/// of a history/candidate item becomes that item's first `title_len − 1`
/// title words (padded by repetition); subset items stay single slots.
pub fn assemble_prompt(
    vocab: &Vocab,
    catalog: Option<&Catalog>,
    history: &[u32],
    pool: &CandidatePool,
    ppt: Option<&PptInstance>,
    mode: PromptMode,
    m: usize,
    title_len: usize,
) -> Result<HybridPrompt> {
    if pool.len() != m {
        return Err(invalid(format!("pool of {} candidates, expected {m}", pool.len())));
    }
    if history.is_empty() {
        return Err(invalid("empty history"));
    }
    if mode == PromptMode::Title && title_len < 2 {
        return Err(invalid("title mode needs title_len ≥ 2"));
    }
    let w = |s: &str| vocab.id(s).map(Slot::Token);
    let mut slots = Vec::new();
    for s in ["<bos>", "instruction:", "recommend", "the", "next", "item", "history:"] {
        slots.push(w(s)?);
    }
    let item_slots = |slots: &mut Vec<Slot>, k: usize, item: u32, role: EmbedRole| -> Result<()> {
        slots.push(Slot::Token(vocab.index_token(k)?));
        match mode {
            PromptMode::Speeder => slots.push(Slot::Embed { item, role }),
            PromptMode::Title => {
                let cat = catalog.ok_or_else(|| invalid("title mode needs the catalog"))?;
                let title = &cat.get(item)?.title_tokens;
                for j in 0..title_len - 1 {
                    slots.push(Slot::Token(vocab.title_token(title[j % title.len()])?));
                }
            }
        }
        Ok(())
    };
    for (k, item) in history.iter().enumerate() {
        item_slots(&mut slots, k + 1, *item, EmbedRole::History(k))?;
    }
    let mut targets = Vec::new();
    if let Some(p) = ppt {
        slots.push(w("proxy:")?);
        for item in p.items {
            slots.push(Slot::Embed {
                item,
                role: EmbedRole::Subset,
            });
        }
        for s in ["is", "gap(a,b)", "not-greater", "than", "gap(b,c)", "?"] {
            slots.push(w(s)?);
        }
        targets.push(if p.label { vocab.yes() } else { vocab.no() });
    }
    slots.push(w("candidates:")?);
    for (j, item) in pool.candidates.iter().enumerate() {
        item_slots(&mut slots, j + 1, *item, EmbedRole::Candidate)?;
    }
    for s in ["output:", "yes/no", "index", "answer:"] {
        slots.push(w(s)?);
    }
    targets.push(vocab.index_token(pool.positive_index + 1)?);
    Ok(HybridPrompt {
        slots,
        targets,
        mode,
        n: history.len(),
        m,
        has_proxy: ppt.is_some(),
        title_len,
    })
}
