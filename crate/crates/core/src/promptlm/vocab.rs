use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed template words, in id order after the specials.
pub const TEMPLATE_WORDS: &[&str] = &[
    "instruction:",
    "recommend",
    "the",
    "next",
    "item",
    "history:",
    "proxy:",
    "is",
    "gap(a,b)",
    "not-greater",
    "than",
    "gap(b,c)",
    "?",
    "candidates:",
    "output:",
    "yes/no",
    "index",
    "answer:",
];

/// Token ↔ id table: specials, template words, answers, index tokens
/// `#1..#K`, then title words `w0..`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, u32>,
    pub max_index: usize,
    pub title_words: usize,
}

impl Vocab {
    pub fn new(max_index: usize, title_words: usize) -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "yes", "no"].iter().map(|s| s.to_string()).collect();
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend((1..=max_index).map(|i| format!("#{i}")));
        tokens.extend((0..title_words).map(|i| format!("w{i}")));
        Self::from_tokens(tokens, max_index, title_words)
    }

    fn from_tokens(tokens: Vec<String>, max_index: usize, title_words: usize) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self {
            tokens,
            ids,
            max_index,
            title_words,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("token `{token}` not in vocabulary")))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn yes(&self) -> u32 {
        2
    }

    pub fn no(&self) -> u32 {
        3
    }

    /// Id of `#k` for `1 ≤ k ≤ max_index`.
    pub fn index_token(&self, k: usize) -> Result<u32> {
        if k == 0 || k > self.max_index {
            return Err(Error::Invalid(format!("index {k} outside 1..={}", self.max_index)));
        }
        Ok((4 + TEMPLATE_WORDS.len() + k - 1) as u32)
    }

    /// Inverse of [`index_token`](Self::index_token).
    pub fn index_of(&self, id: u32) -> Option<usize> {
        let first = (4 + TEMPLATE_WORDS.len()) as u32;
        (id >= first && ((id - first) as usize) < self.max_index).then(|| (id - first) as usize + 1)
    }

    pub fn title_token(&self, word: u32) -> Result<u32> {
        if word as usize >= self.title_words {
            return Err(Error::Invalid(format!("title word {word} outside vocabulary")));
        }
        Ok((4 + TEMPLATE_WORDS.len() + self.max_index) as u32 + word)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let v: Vocab = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(Self::from_tokens(v.tokens, v.max_index, v.title_words))
    }
}
