use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<u32>,
    pub positive_index: usize,
}

impl CandidatePool {
    pub fn positive(&self) -> u32 {
        self.candidates[self.positive_index]
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// One positive plus `m − 1` distinct negatives drawn uniformly from items
/// outside the history; the positive lands at a uniform position.
pub fn sample_candidate_pool<R: Rng + ?Sized>(
    history: &[u32],
    next_item: u32,
    catalog_size: usize,
    m: usize,
    rng: &mut R,
) -> Result<CandidatePool> {
    if m == 0 {
        return Err(invalid("pool size must be positive"));
    }
    if next_item as usize >= catalog_size {
        return Err(crate::Error::UnknownItem(next_item));
    }
    let seen: BTreeSet<u32> = history.iter().copied().chain([next_item]).collect();
    let eligible: Vec<u32> = (0..catalog_size as u32).filter(|i| !seen.contains(i)).collect();
    if eligible.len() < m - 1 {
        return Err(invalid(format!(
            "only {} non-interacted items for {} negatives",
            eligible.len(),
            m - 1
        )));
    }
    let mut candidates: Vec<u32> = eligible.choose_multiple(rng, m - 1).copied().collect();
    let positive_index = rng.gen_range(0..m);
    candidates.insert(positive_index, next_item);
    Ok(CandidatePool {
        candidates,
        positive_index,
    })
}
