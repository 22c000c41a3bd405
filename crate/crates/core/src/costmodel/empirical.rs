use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_catalog, CandidatePool, CatalogConfig};
use crate::error::{invalid, Result};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::promptlm::{assemble_prompt, decode, embed_prompt, init_lm, logits_at, LmConfig, PromptMode, Vocab};
use crate::rng::seeded;
use crate::spae::PptInstance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConfig {
    pub ns: Vec<usize>,
    pub m: usize,
    pub title_len: usize,
    pub lm: LmConfig,
    /// Timed repetitions per point; the median is reported.
    pub reps: usize,
    pub seed: u64,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        Self {
            ns: vec![10, 20, 40, 80],
            m: 5,
            title_len: 20,
            lm: LmConfig {
                context: 1 << 14,
                ..LmConfig::default()
            },
            reps: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPoint {
    pub n: usize,
    pub mode: PromptMode,
    /// Measured prompt slots.
    pub slots: usize,
    /// `Avg_token·(n + m) + t0`.
    pub formula_slots: usize,
    pub t0: usize,
    /// Forward multiply-accumulates of one training example.
    pub macs: u64,
    /// Median wall time of one forward + backward pass.
    pub seconds: f64,
}

/// Times one training example (prompt forward, two target logits,
/// backward) per `(n, mode)` with pre-computed item embeddings.
pub fn empirical_counters(cfg: &EmpiricalConfig) -> Result<Vec<EmpiricalPoint>> {
    let n_hi = *cfg.ns.iter().max().ok_or_else(|| invalid("empty n grid"))?;
    if cfg.ns.iter().any(|n| *n < 3) || cfg.reps == 0 {
        return Err(invalid("n must be ≥ 3 and reps ≥ 1"));
    }
    let catalog = generate_catalog(
        &CatalogConfig {
            size: n_hi + cfg.m + 10,
            title_len: cfg.title_len,
            ..Default::default()
        },
        cfg.m,
        cfg.seed,
    )?;
    let vocab = Vocab::new(n_hi.max(cfg.m), catalog.title_vocab);
    let mut params = ParamStore::new();
    init_lm(&mut params, &cfg.lm, vocab.len(), &mut seeded(cfg.seed, &[1]))?;
    let mut rng = seeded(cfg.seed, &[2]);
    let emb = Tensor::uniform(&[catalog.len(), cfg.lm.d], 1.0, &mut rng);
    let group_of = |it: u32| Ok(it as usize);
    // t0 is measured once from a reference prompt and then held constant.
    let t0 = {
        let h: Vec<u32> = (0..3).collect();
        let pool = CandidatePool {
            candidates: (3..3 + cfg.m as u32).collect(),
            positive_index: 0,
        };
        let ppt = PptInstance::new(&h, [0, 1, 2])?;
        let p = assemble_prompt(&vocab, Some(&catalog), &h, &pool, Some(&ppt), PromptMode::Speeder, cfg.m, cfg.title_len)?;
        p.len() - 2 * (3 + cfg.m)
    };
    let mut out = Vec::new();
    for &n in &cfg.ns {
        let history: Vec<u32> = (0..n as u32).collect();
        let pool = CandidatePool {
            candidates: (n as u32..(n + cfg.m) as u32).collect(),
            positive_index: 0,
        };
        let ppt = PptInstance::new(&history, [0, 1, 2])?;
        for mode in [PromptMode::Speeder, PromptMode::Title] {
            let p = assemble_prompt(&vocab, Some(&catalog), &history, &pool, Some(&ppt), mode, cfg.m, cfg.title_len)?;
            let rows: Vec<usize> = history.iter().map(|i| *i as usize).collect();
            let mut times = Vec::with_capacity(cfg.reps);
            let mut macs = 0;
            for _ in 0..cfg.reps {
                let t = Instant::now();
                let mut tape = Tape::new(&params);
                let e = tape.constant_ref(&emb);
                let composed = tape.gather_rows(e, &rows)?;
                let x = embed_prompt(&mut tape, &p, &p.targets[..1], Some(e), Some(composed), &group_of)?;
                let h = decode(&mut tape, &cfg.lm, x)?;
                let l = logits_at(&mut tape, h, &[p.len() - 1, p.len()])?;
                let targets: Vec<usize> = p.targets.iter().map(|t| *t as usize).collect();
                let loss = tape.cross_entropy(l, &targets, &[1.0, 1.0])?;
                macs = tape.macs();
                tape.backward(loss)?;
                times.push(t.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            out.push(EmpiricalPoint {
                n,
                mode,
                slots: p.len(),
                formula_slots: p.avg_token() * (n + cfg.m) + t0,
                t0,
                macs,
                seconds: times[times.len() / 2],
            });
        }
    }
    Ok(out)
}
