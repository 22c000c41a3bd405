//! Sequential position awareness: the three-item position proxy task and
//! the learnable per-position prompt table added to history embeddings.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const PPL_NAME: &str = "spae.ppl";

/// `yes` iff `|a − b| ≤ |b − c|` (ties answer yes).
pub fn ppt_label(a: usize, b: usize, c: usize) -> bool {
    a.abs_diff(b) <= b.abs_diff(c)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PptInstance {
    /// Positions in sampled order (not sorted).
    pub positions: [usize; 3],
    pub items: [u32; 3],
    /// `true` = yes.
    pub label: bool,
}

impl PptInstance {
    pub fn new(history: &[u32], positions: [usize; 3]) -> Result<Self> {
        let [a, b, c] = positions;
        if a == b || b == c || a == c {
            return Err(invalid("subset positions must be distinct"));
        }
        let get = |p: usize| {
            history
                .get(p)
                .copied()
                .ok_or_else(|| invalid(format!("position {p} beyond history of {}", history.len())))
        };
        let items = [get(a)?, get(b)?, get(c)?];
        if items[0] == items[1] || items[1] == items[2] || items[0] == items[2] {
            return Err(invalid("subset items must be distinct"));
        }
        Ok(Self {
            positions,
            items,
            label: ppt_label(a, b, c),
        })
    }
}

/// Three uniformly random positions holding distinct items.
pub fn sample_ppt<R: Rng + ?Sized>(history: &[u32], rng: &mut R) -> Result<PptInstance> {
    if history.iter().collect::<BTreeSet<_>>().len() < 3 {
        return Err(invalid("proxy task needs at least 3 distinct items"));
    }
    loop {
        let idx = sample(rng, history.len(), 3);
        let positions = [idx.index(0), idx.index(1), idx.index(2)];
        match PptInstance::new(history, positions) {
            Ok(inst) => return Ok(inst),
            Err(_) => continue,
        }
    }
}

/// Zero-initialized `[n_max, d]` position prompt table.
pub fn init_ppl(store: &mut ParamStore, n_max: usize, d: usize) {
    store.insert(PPL_NAME, Tensor::zeros(&[n_max, d]));
}

/// Rows `p_1..p_n` of the table: a borrowed prefix of the same storage.
pub fn truncate_ppl(table: &Tensor, n: usize) -> Result<&[f64]> {
    let (n_max, d) = (table.rows(), table.cols());
    if n == 0 || n > n_max {
        return Err(invalid(format!("truncate to {n} rows outside 1..={n_max}")));
    }
    Ok(&table.data()[..n * d])
}

/// `S_inter = S_mm + PPL[..n]` elementwise.
pub fn compose(seq_mm: &[Vec<f64>], table: &Tensor) -> Result<Vec<Vec<f64>>> {
    let d = table.cols();
    let rows = truncate_ppl(table, seq_mm.len())?;
    seq_mm
        .iter()
        .zip(rows.chunks(d))
        .map(|(e, p)| {
            if e.len() != d {
                return Err(Error::Shape {
                    op: "compose",
                    lhs: vec![e.len()],
                    rhs: vec![d],
                });
            }
            Ok(e.iter().zip(p).map(|(a, b)| a + b).collect())
        })
        .collect()
}

/// Tape form of [`compose`]: `seq_mm` is `[n, d]`.
pub fn compose_on_tape(tape: &mut Tape, seq_mm: Var) -> Result<Var> {
    let n = tape.value(seq_mm).rows();
    let table = tape.param(PPL_NAME)?;
    let n_max = tape.value(table).rows();
    if n > n_max {
        return Err(invalid(format!("history of {n} exceeds n_max {n_max}")));
    }
    let rows: Vec<usize> = (0..n).collect();
    let p = tape.gather_rows(table, &rows)?;
    tape.add(seq_mm, p)
}
