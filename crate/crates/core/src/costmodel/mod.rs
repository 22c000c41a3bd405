//! Closed-form space and time model of prompt-injected recommendation,
//! plus measured counterparts from the decoder.

mod empirical;

pub use empirical::{empirical_counters, EmpiricalConfig, EmpiricalPoint};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Symbolic sizes; costs are in abstract multiply-accumulate units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// History length.
    pub n: u64,
    /// Candidate pool size.
    pub m: u64,
    /// Prompt slots per item.
    pub avg_token: u64,
    /// Non-item prompt slots.
    pub t0: u64,
    pub d: u64,
    pub layers: u64,
    pub batch: u64,
    /// Training iterations.
    pub iters: u64,
    /// Generated tokens.
    pub t_out: u64,
    pub vocab: u64,
    pub n_max: u64,
    pub p_mrc: u64,
    pub p_adapters: u64,
    pub p_llm: u64,
}

impl CostParams {
    /// Desk defaults with `Avg_token = 2`, one output token.
    pub fn speeder(n: u64) -> Self {
        Self {
            n,
            m: 5,
            avg_token: 2,
            t0: 50,
            d: 64,
            layers: 2,
            batch: 16,
            iters: 1,
            t_out: 1,
            vocab: 1000,
            n_max: 50,
            p_mrc: 0,
            p_adapters: 0,
            p_llm: 0,
        }
    }

    /// Title-token baseline: `Avg_token = 20`, 20 output tokens.
    pub fn title_baseline(n: u64) -> Self {
        Self {
            avg_token: 20,
            t_out: 20,
            ..Self::speeder(n)
        }
    }

    pub fn with_n(self, n: u64) -> Self {
        Self { n, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.n, self.m, self.avg_token, self.d, self.layers, self.batch, self.iters, self.t_out];
        if all.iter().any(|v| *v == 0) {
            return Err(invalid("cost parameters must be positive"));
        }
        Ok(())
    }

    /// `N = Avg_token·(n + m) + t0`.
    pub fn prompt_len(&self) -> u64 {
        self.avg_token * (self.n + self.m) + self.t0
    }

    /// `k = m·Avg_token + t0`, the n-independent part of `N`.
    pub fn k(&self) -> u64 {
        self.m * self.avg_token + self.t0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceBreakdown {
    pub p_mrc: u64,
    pub p_adapters: u64,
    pub p_llm: u64,
    pub p_ppl: u64,
    pub p_vocab: u64,
    pub total: u64,
}

/// `P_MRC + P_Adapters + P_LLM + n_max·d + |V|·d` scalars.
pub fn space_cost(p: &CostParams) -> SpaceBreakdown {
    let p_ppl = p.n_max * p.d;
    let p_vocab = p.vocab * p.d;
    SpaceBreakdown {
        p_mrc: p.p_mrc,
        p_adapters: p.p_adapters,
        p_llm: p.p_llm,
        p_ppl,
        p_vocab,
        total: p.p_mrc + p.p_adapters + p.p_llm + p_ppl + p_vocab,
    }
}

/// `T·B·L·(N²·d + N·d²)`.
pub fn train_cost(p: &CostParams) -> f64 {
    let (n, d) = (p.prompt_len() as f64, p.d as f64);
    (p.iters * p.batch * p.layers) as f64 * (n * n * d + n * d * d)
}

/// `L·t_out·(N·d + d²)`.
pub fn infer_cost(p: &CostParams) -> f64 {
    let (n, d) = (p.prompt_len() as f64, p.d as f64);
    (p.layers * p.t_out) as f64 * (n * d + d * d)
}

/// Exact integer form of [`train_cost`].
pub fn train_cost_exact(p: &CostParams) -> u128 {
    let (n, d) = (p.prompt_len() as u128, p.d as u128);
    (p.iters as u128) * (p.batch as u128) * (p.layers as u128) * (n * n * d + n * d * d)
}

/// Per-item fusion overhead `(n + m)·(T_fusion + T_adapters)`, reported
/// apart from the decoder cost.
pub fn fusion_overhead(p: &CostParams, t_fusion: f64, t_adapters: f64) -> f64 {
    (p.n + p.m) as f64 * (t_fusion + t_adapters)
}

/// Coefficients of the training cost as a polynomial in `n`:
/// `k1 = Avg²·d`, `k2 = Avg·(2·k·d + d²)`, `k3 = k·d·(k + d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    pub k1: u128,
    pub k2: u128,
    pub k3: u128,
}

pub fn expansion(p: &CostParams) -> Expansion {
    let (a, d, k) = (p.avg_token as u128, p.d as u128, p.k() as u128);
    Expansion {
        k1: a * a * d,
        k2: a * (2 * k * d + d * d),
        k3: k * d * (k + d),
    }
}

/// `T·B·L·(k1·n² + k2·n + k3)` in exact integers.
pub fn train_cost_expanded_exact(p: &CostParams) -> u128 {
    let e = expansion(p);
    let n = p.n as u128;
    (p.iters as u128) * (p.batch as u128) * (p.layers as u128) * (e.k1 * n * n + e.k2 * n + e.k3)
}

/// Floating form of the expanded polynomial.
pub fn train_cost_expanded(p: &CostParams) -> f64 {
    let e = expansion(p);
    let n = p.n as f64;
    (p.iters * p.batch * p.layers) as f64 * (e.k1 as f64 * n * n + e.k2 as f64 * n + e.k3 as f64)
}

fn check_comparable(base: &CostParams, ours: &CostParams) -> Result<()> {
    let key = |p: &CostParams| (p.m, p.t0, p.d, p.layers, p.batch, p.iters);
    if key(base) != key(ours) {
        return Err(invalid("baseline and candidate differ beyond Avg_token and t_out"));
    }
    Ok(())
}

/// `C_base(n)/C_ours(n) − 1` for training.
pub fn improvement_train(base: &CostParams, ours: &CostParams, n: u64) -> Result<f64> {
    check_comparable(base, ours)?;
    Ok(train_cost(&base.with_n(n)) / train_cost(&ours.with_n(n)) - 1.0)
}

/// Same ratio for inference.
pub fn improvement_infer(base: &CostParams, ours: &CostParams, n: u64) -> Result<f64> {
    check_comparable(base, ours)?;
    Ok(infer_cost(&base.with_n(n)) / infer_cost(&ours.with_n(n)) - 1.0)
}

/// `n → ∞` limits: `(A_b/A_s)² − 1` and `(t_b/t_s)·(A_b/A_s) − 1`.
pub fn improvement_limits(base: &CostParams, ours: &CostParams) -> (f64, f64) {
    let r = base.avg_token as f64 / ours.avg_token as f64;
    (r * r - 1.0, (base.t_out as f64 / ours.t_out as f64) * r - 1.0)
}

/// One point of an improvement curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: u64,
    pub train_base: f64,
    pub train_ours: f64,
    pub infer_base: f64,
    pub infer_ours: f64,
    pub i_train: f64,
    pub i_infer: f64,
}

pub fn cost_curve(base: &CostParams, ours: &CostParams, ns: &[u64]) -> Result<Vec<CurvePoint>> {
    ns.iter()
        .map(|&n| {
            Ok(CurvePoint {
                n,
                train_base: train_cost(&base.with_n(n)),
                train_ours: train_cost(&ours.with_n(n)),
                infer_base: infer_cost(&base.with_n(n)),
                infer_ours: infer_cost(&ours.with_n(n)),
                i_train: improvement_train(base, ours, n)?,
                i_infer: improvement_infer(base, ours, n)?,
            })
        })
        .collect()
}

/// `count` distinct integers spaced logarithmically over `[lo, hi]`.
pub fn log_grid(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    let (a, b) = ((lo.max(1) as f64).ln(), (hi as f64).ln());
    let mut out: Vec<u64> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count.max(2) - 1) as f64).exp().round() as u64)
        .collect();
    out.dedup();
    out
}
