use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Which keys each query row may attend to.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Rows sharing a group id attend to each other only.
    Groups(Vec<usize>),
}

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: KeySets,
        probs: Vec<f64>,
    },
    Rope {
        x: Var,
        heads: usize,
        pairs: usize,
        base: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

/// Resolved per-query key lists for the attention op.
#[derive(Clone)]
enum KeySets {
    Full(usize),
    Causal,
    Lists(Vec<Vec<usize>>),
}

impl KeySets {
    /// Prefix offsets of each query's key list in the compact probability buffer.
    fn offsets(&self, nq: usize) -> Vec<usize> {
        let mut offs = Vec::with_capacity(nq + 1);
        offs.push(0);
        for i in 0..nq {
            let n = match self {
                KeySets::Full(n) => *n,
                KeySets::Causal => i + 1,
                KeySets::Lists(l) => l[i].len(),
            };
            offs.push(offs[i] + n);
        }
        offs
    }

    fn keys(&self, i: usize) -> KeyIter<'_> {
        match self {
            KeySets::Full(n) => KeyIter::Range(0..*n),
            KeySets::Causal => KeyIter::Range(0..i + 1),
            KeySets::Lists(l) => KeyIter::List(l[i].iter()),
        }
    }
}

enum KeyIter<'a> {
    Range(std::ops::Range<usize>),
    List(std::slice::Iter<'a, usize>),
}

impl Iterator for KeyIter<'_> {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        match self {
            KeyIter::Range(r) => r.next(),
            KeyIter::List(l) => l.next().copied(),
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Parameters are borrowed from a [`ParamStore`]; frozen parameters enter
/// the graph as constants and never receive a gradient.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    params: HashMap<String, Var>,
    track: bool,
    macs: u64,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
            macs: 0,
        }
    }

    /// A tape with no parameter store; only constants.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            track: false,
            macs: 0,
        }
    }

    /// Inference tape: every parameter is treated as a constant.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    /// Multiply-accumulate count of the matmul and attention ops recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Borrowed constant; avoids copying large read-only tables.
    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Names of every parameter read so far, sorted.
    pub fn touched_params(&self) -> Vec<String> {
        let mut v: Vec<String> = self.params.keys().cloned().collect();
        v.sort();
        v
    }

    /// Looks up a parameter; repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let trainable = self.track && !store.is_frozen(name);
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Param(name.to_string()),
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(shape_err("add_bias", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut t = self.value(a).clone();
        t.scale_in_place(k);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layernorm", tx, tg));
        }
        let r = tx.rows();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Output row `g` is the mean of the rows listed in `groups[g]`.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = vec![0.0; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Invalid("group_mean: empty group".into()));
            }
            let dst = &mut out[g * c..(g + 1) * c];
            for &r in members {
                if r >= tx.rows() {
                    return Err(Error::Invalid(format!("group_mean: row {r} out of range")));
                }
                for (d, s) in dst.iter_mut().zip(tx.row_slice(r)) {
                    *d += s;
                }
            }
            let k = 1.0 / members.len() as f64;
            dst.iter_mut().for_each(|d| *d *= k);
        }
        let t = Tensor::new(vec![groups.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GroupMean { x, groups }, rg))
    }

    /// Mean over all rows, giving a single row.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rows();
        self.group_mean(x, vec![(0..r).collect()])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let r = first.rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != r {
                return Err(shape_err("concat_cols", first, t));
            }
            let c = t.cols();
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(t.row_slice(i));
            }
            off += c;
        }
        let t = Tensor::new(vec![r, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let c = first.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", first, t));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let t = Tensor::new(vec![rows, c], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > c || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let r = tx.rows();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.row_slice(i)[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn gather(&mut self, sources: &[Var], picks: Vec<(usize, usize)>) -> Result<Var> {
        let c = self.value(sources[0]).cols();
        let mut out = Vec::with_capacity(picks.len() * c);
        for &(s, r) in &picks {
            let t = self
                .value(*sources.get(s).ok_or_else(|| Error::Invalid("gather: bad source".into()))?);
            if t.cols() != c || r >= t.rows() {
                return Err(Error::Shape {
                    op: "gather",
                    lhs: t.shape().to_vec(),
                    rhs: vec![r, c],
                });
            }
            out.extend_from_slice(t.row_slice(r));
        }
        if picks.is_empty() {
            return Err(Error::Invalid("gather: no rows".into()));
        }
        let t = Tensor::new(vec![picks.len(), c], out)?;
        let rg = self.rg(sources);
        Ok(self.push(
            t,
            Op::Gather {
                sources: sources.to_vec(),
                picks,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.gather(&[x], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Multi-head scaled dot-product attention on pre-projected `q`, `k`, `v`.
    ///
    /// Columns are split into `heads` contiguous blocks; the output keeps the
    /// concatenated head layout (no output projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(shape_err("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("attention: {d} columns not divisible by {heads} heads")));
        }
        let (nq, nk) = (tq.rows(), tk.rows());
        let keys = match mask {
            AttnMask::Full => KeySets::Full(nk),
            AttnMask::Causal => {
                if nq != nk {
                    return Err(shape_err("attention(causal)", tq, tk));
                }
                KeySets::Causal
            }
            AttnMask::Groups(ids) => {
                if ids.len() != nq || nq != nk {
                    return Err(Error::Shape {
                        op: "attention(groups)",
                        lhs: tq.shape().to_vec(),
                        rhs: vec![ids.len()],
                    });
                }
                let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, g) in ids.iter().enumerate() {
                    members.entry(*g).or_default().push(i);
                }
                KeySets::Lists(ids.iter().map(|g| members[g].clone()).collect())
            }
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let offs = keys.offsets(nq);
        let total = offs[nq];
        let mut probs = vec![0.0; heads * total];
        let mut out = vec![0.0; nq * d];
        let mut macs = 0u64;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &tq.row_slice(i)[off..off + dh];
                let p = &mut probs[h * total + offs[i]..h * total + offs[i + 1]];
                let mut max = f64::NEG_INFINITY;
                for (t, j) in keys.keys(i).enumerate() {
                    let kj = &tk.row_slice(j)[off..off + dh];
                    let s = dot(qi, kj) * scale;
                    p[t] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for pt in p.iter_mut() {
                    *pt = (*pt - max).exp();
                    sum += *pt;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for (t, j) in keys.keys(i).enumerate() {
                    p[t] /= sum;
                    let vj = &tv.row_slice(j)[off..off + dh];
                    for (oo, vv) in o.iter_mut().zip(vj) {
                        *oo += p[t] * vv;
                    }
                    macs += 2 * dh as u64;
                }
            }
        }
        self.macs += macs;
        let t = Tensor::new(vec![nq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                probs,
            },
            rg,
        ))
    }

    /// Dense attention probabilities `[heads·nq, nk]` of the attention node `v`.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        let Op::Attention { q, k, heads, keys, probs, .. } = &self.nodes[v.0].op else {
            return None;
        };
        let (nq, nk) = (self.value(*q).rows(), self.value(*k).rows());
        let offs = keys.offsets(nq);
        let total = offs[nq];
        let mut dense = vec![0.0; heads * nq * nk];
        for h in 0..*heads {
            for i in 0..nq {
                for (t, j) in keys.keys(i).enumerate() {
                    dense[(h * nq + i) * nk + j] = probs[h * total + offs[i] + t];
                }
            }
        }
        Tensor::new(vec![heads * nq, nk], dense).ok()
    }

    /// Dense probabilities of the most recently recorded attention node.
    pub fn last_attention_probs(&self) -> Option<Tensor> {
        let i = self.nodes.iter().rposition(|n| matches!(n.op, Op::Attention { .. }))?;
        self.attention_probs(Var(i))
    }

    /// Rotary position embedding applied per head; row `i` sits at position `i`.
    pub fn rope(&mut self, x: Var, heads: usize) -> Result<Var> {
        let d = self.value(x).cols();
        let pairs = if heads == 0 { 0 } else { d / heads / 2 };
        self.rope_partial(x, heads, pairs, ROPE_BASE)
    }

    /// Rotary encoding with wavelength base `base` on the first `pairs`
    /// column pairs of every head; the remaining columns pass through.
    pub fn rope_partial(&mut self, x: Var, heads: usize, pairs: usize, base: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 || pairs == 0 || 2 * pairs > d / heads || !(base > 1.0) {
            return Err(Error::Config(format!("rope: {d} columns, {heads} heads, {pairs} rotated pairs")));
        }
        let out = rope_rotate(tx, heads, pairs, base, 1.0);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rope { x, heads, pairs, base }, rg))
    }

    /// `Σ_r w_r · −log softmax(logits_r)[targets_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r || weights.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets.is_empty() {
            return Err(Error::Invalid("cross_entropy: empty targets".into()));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[i];
            if t >= c {
                return Err(Error::Invalid(format!("cross_entropy: target {t} ≥ vocab {c}")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += weights[i] * (lse - row[t]);
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ x ⊙ w` for a constant weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(shape_err("weighted_sum", tx, &weights));
        }
        let s = dot(tx.data(), weights.data());
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let w = Tensor::full(self.value(x).shape(), 1.0);
        self.weighted_sum(x, w)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of trainable
    /// parameters that took part in the graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut out = Gradients::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    out.insert(name.clone(), g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                        self.acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                        self.acc(&mut grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                    }
                }
                Op::MatMulT(a, b) => {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), false, &mut da, false);
                        self.acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), true, ta.data(), false, &mut db, false);
                        self.acc(&mut grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    let mut gb = g;
                    gb.scale_in_place(-1.0);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                        self.acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                    }
                    if self.requires_grad(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                        self.acc(&mut grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.requires_grad(*b) {
                        let tb = self.value(*b);
                        let c = tb.len();
                        let mut db = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        self.acc(&mut grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Scale(a, k) => {
                    let mut ga = g;
                    ga.scale_in_place(*k);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gg, x)| if *x > 0.0 { *gg } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gg, yy)| gg * (1.0 - yy * yy))
                        .collect();
                    self.acc(&mut grads, *a, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let tg = self.value(*gamma);
                    let c = tg.len();
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![0.0; c];
                        let mut db = vec![0.0; c];
                        for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * hr[j];
                                db[j] += gr[j];
                            }
                        }
                        self.acc(&mut grads, *gamma, Tensor::new(tg.shape().to_vec(), dg)?);
                        let tb = self.value(*beta);
                        self.acc(&mut grads, *beta, Tensor::new(tb.shape().to_vec(), db)?);
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; g.len()];
                        let inv_c = 1.0 / c as f64;
                        for (i, ((dr, gr), hr)) in dx
                            .chunks_mut(c)
                            .zip(g.data().chunks(c))
                            .zip(xhat.chunks(c))
                            .enumerate()
                        {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let dh = gr[j] * tg.data()[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 *= inv_c;
                            m2 *= inv_c;
                            for j in 0..c {
                                let dh = gr[j] * tg.data()[j];
                                dr[j] = inv_std[i] * (dh - m1 - hr[j] * m2);
                            }
                        }
                        let tx = self.value(*x);
                        self.acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                    }
                }
                Op::GroupMean { x, groups } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.len()];
                    for (gi, members) in groups.iter().enumerate() {
                        let k = 1.0 / members.len() as f64;
                        let gr = g.row_slice(gi);
                        for &r in members {
                            for (d, v) in dx[r * c..(r + 1) * c].iter_mut().zip(gr) {
                                *d += v * k;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let r = g.rows();
                    let mut off = 0;
                    for p in parts {
                        let tp = self.value(*p);
                        let c = tp.cols();
                        if self.requires_grad(*p) {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                            }
                            self.acc(&mut grads, *p, Tensor::new(tp.shape().to_vec(), d)?);
                        }
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let tp = self.value(*p);
                        let n = tp.len();
                        if self.requires_grad(*p) {
                            let d = g.data()[off..off + n].to_vec();
                            self.acc(&mut grads, *p, Tensor::new(tp.shape().to_vec(), d)?);
                        }
                        off += n;
                    }
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let (r, c, len) = (tx.rows(), tx.cols(), g.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                    }
                    self.acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                Op::Gather { sources, picks } => {
                    let mut partial: Vec<Option<Vec<f64>>> = vec![None; sources.len()];
                    for (i, &(s, r)) in picks.iter().enumerate() {
                        if !self.requires_grad(sources[s]) {
                            continue;
                        }
                        let ts = self.value(sources[s]);
                        let c = ts.cols();
                        let buf = partial[s].get_or_insert_with(|| vec![0.0; ts.len()]);
                        for (d, v) in buf[r * c..(r + 1) * c].iter_mut().zip(g.row_slice(i)) {
                            *d += v;
                        }
                    }
                    for (s, buf) in partial.into_iter().enumerate() {
                        if let Some(buf) = buf {
                            let ts = self.value(sources[s]);
                            self.acc(&mut grads, sources[s], Tensor::new(ts.shape().to_vec(), buf)?);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    keys,
                    probs,
                } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = tq.cols();
                    let (nq, nk) = (tq.rows(), tk.rows());
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; nq * d];
                    let mut dk = vec![0.0; nk * d];
                    let mut dv = vec![0.0; nk * d];
                    let offs = keys.offsets(nq);
                    let total = offs[nq];
                    let mut dp = vec![0.0; nk];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..nq {
                            let p = &probs[h * total + offs[i]..h * total + offs[i + 1]];
                            let go = &g.row_slice(i)[off..off + dh];
                            let mut s = 0.0;
                            for (t, j) in keys.keys(i).enumerate() {
                                let vj = &tv.row_slice(j)[off..off + dh];
                                dp[t] = dot(go, vj);
                                s += p[t] * dp[t];
                                for (dvv, gg) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                    *dvv += p[t] * gg;
                                }
                            }
                            let qi = &tq.row_slice(i)[off..off + dh];
                            for (t, j) in keys.keys(i).enumerate() {
                                let ds = p[t] * (dp[t] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &tk.row_slice(j)[off..off + dh];
                                for (dqq, kk) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                                    *dqq += ds * kk;
                                }
                                for (dkk, qq) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                                    *dkk += ds * qq;
                                }
                            }
                        }
                    }
                    let (sq, sk, sv) = (tq.shape().to_vec(), tk.shape().to_vec(), tv.shape().to_vec());
                    self.acc(&mut grads, *q, Tensor::new(sq, dq)?);
                    self.acc(&mut grads, *k, Tensor::new(sk, dk)?);
                    self.acc(&mut grads, *v, Tensor::new(sv, dv)?);
                }
                Op::Rope { x, heads, pairs, base } => {
                    let back = rope_rotate(&g, *heads, *pairs, *base, -1.0);
                    self.acc(&mut grads, *x, back);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let tl = self.value(*logits);
                    let c = tl.cols();
                    let gs = g.data()[0];
                    let mut d = probs.clone();
                    for (i, row) in d.chunks_mut(c).enumerate() {
                        row[targets[i]] -= 1.0;
                        let w = weights[i] * gs;
                        row.iter_mut().for_each(|x| *x *= w);
                    }
                    self.acc(&mut grads, *logits, Tensor::new(tl.shape().to_vec(), d)?);
                }
                Op::WeightedSum { x, weights } => {
                    let gs = g.data()[0];
                    let tx = self.value(*x);
                    let d = weights.data().iter().map(|w| w * gs).collect();
                    self.acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Rotates column pairs `(2j, 2j+1)` of each head by `sign · pos · θ_j`.
fn rope_rotate(x: &Tensor, heads: usize, pairs: usize, base: f64, sign: f64) -> Tensor {
    let (r, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let freqs: Vec<f64> = (0..pairs)
        .map(|j| base.powf(-(j as f64) / pairs as f64))
        .collect();
    let mut out = x.data().to_vec();
    for i in 0..r {
        for (j, f) in freqs.iter().enumerate() {
            let (s, c) = (sign * i as f64 * f).sin_cos();
            for h in 0..heads {
                let a = i * d + h * dh + 2 * j;
                let (x0, x1) = (out[a], out[a + 1]);
                out[a] = x0 * c - x1 * s;
                out[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
