//! Mixture of modality experts: shared multi-head self-attention over an
//! item's stacked modality rows, hard-routed per-modality FFN experts in the
//! first `l1` layers, the multimodal expert alone in the last `l2` layers,
//! then average pooling and the fusion adapter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{adapt_on_tape, AdapterSlot, Modality};
use crate::error::{invalid, Error, Result};
use crate::numerics::{init_linear, AttnMask, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expert {
    Textual,
    Visual,
    Sequential,
    Multimodal,
}

impl Expert {
    pub fn tag(self) -> &'static str {
        match self {
            Expert::Textual => "textual",
            Expert::Visual => "visual",
            Expert::Sequential => "sequential",
            Expert::Multimodal => "multimodal",
        }
    }

    pub fn for_modality(m: Modality) -> Self {
        match m {
            Modality::Text => Expert::Textual,
            Modality::Vision => Expert::Visual,
            Modality::Sequential => Expert::Sequential,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoMEConfig {
    pub d_f: usize,
    pub heads: usize,
    pub l1: usize,
    pub l2: usize,
    /// Hidden width of every expert; 0 means `4·d_f`.
    pub d_ffn: usize,
}

impl Default for MoMEConfig {
    fn default() -> Self {
        Self {
            d_f: 64,
            heads: 4,
            l1: 1,
            l2: 1,
            d_ffn: 0,
        }
    }
}

impl MoMEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_f == 0 || self.d_f % self.heads != 0 {
            return Err(Error::Config(format!("d_f {} not divisible by {} heads", self.d_f, self.heads)));
        }
        if self.l1 < 1 || self.l2 < 1 {
            return Err(Error::Config("MoME needs l1 ≥ 1 and l2 ≥ 1".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        if self.d_ffn == 0 {
            4 * self.d_f
        } else {
            self.d_ffn
        }
    }

    pub fn layers(&self) -> usize {
        self.l1 + self.l2
    }

    /// Experts present in `layer`.
    pub fn experts(&self, layer: usize) -> &'static [Expert] {
        if layer < self.l1 {
            &[Expert::Textual, Expert::Visual, Expert::Sequential]
        } else {
            &[Expert::Multimodal]
        }
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("mome.layer{layer}")
}

pub fn expert_prefix(layer: usize, e: Expert) -> String {
    format!("mome.layer{layer}.expert.{}", e.tag())
}

pub fn init_mome<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &MoMEConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (d, dh, ff) = (cfg.d_f, cfg.d_f / cfg.heads, cfg.ffn_dim());
    for l in 0..cfg.layers() {
        let lp = layer_prefix(l);
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            store.insert(format!("{lp}.mhsa.{w}"), init_linear(d, d, rng));
        }
        for h in 0..cfg.heads {
            for w in ["w_q", "w_k", "w_v"] {
                store.insert(format!("{lp}.mhsa.head{h}.{w}"), init_linear(d, dh, rng));
            }
        }
        for ln in ["ln_attn", "ln_ffn"] {
            store.insert(format!("{lp}.{ln}.gamma"), Tensor::full(&[d], 1.0));
            store.insert(format!("{lp}.{ln}.beta"), Tensor::zeros(&[d]));
        }
        for e in cfg.experts(l) {
            let ep = expert_prefix(l, *e);
            store.insert(format!("{ep}.w1"), init_linear(d, ff, rng));
            store.insert(format!("{ep}.b1"), Tensor::zeros(&[ff]));
            store.insert(format!("{ep}.w2"), init_linear(ff, d, rng));
            store.insert(format!("{ep}.b2"), Tensor::zeros(&[d]));
        }
    }
    Ok(())
}

/// `Concat_i(softmax(Q_i K_iᵀ/√d_h) V_i) W_o` with `Q_i = (H W_Q) W_i^Q`
/// (likewise K, V). Rows attend only within their group.
pub fn mhsa(tape: &mut Tape, cfg: &MoMEConfig, layer: usize, h: Var, groups: &[usize]) -> Result<Var> {
    let lp = layer_prefix(layer);
    let mut proj = [None; 3];
    for (slot, w) in ["w_q", "w_k", "w_v"].iter().enumerate() {
        let shared = tape.param(&format!("{lp}.mhsa.{w}"))?;
        let heads = (0..cfg.heads)
            .map(|i| tape.param(&format!("{lp}.mhsa.head{i}.{w}")))
            .collect::<Result<Vec<_>>>()?;
        let per_head = tape.concat_cols(&heads)?;
        let hw = tape.matmul(h, shared)?;
        proj[slot] = Some(tape.matmul(hw, per_head)?);
    }
    let [q, k, v] = proj.map(|p| p.expect("set"));
    let a = tape.attention(q, k, v, cfg.heads, &AttnMask::Groups(groups.to_vec()))?;
    let wo = tape.param(&format!("{lp}.mhsa.w_o"))?;
    tape.matmul(a, wo)
}

/// `ReLU(x W_1 + b_1) W_2 + b_2` for one expert of one layer.
pub fn expert_ffn(tape: &mut Tape, layer: usize, e: Expert, x: Var) -> Result<Var> {
    let ep = expert_prefix(layer, e);
    let w1 = tape
        .param(&format!("{ep}.w1"))
        .map_err(|_| Error::UnknownExpert(format!("{} in layer {layer}", e.tag())))?;
    let (b1, w2, b2) = (
        tape.param(&format!("{ep}.b1"))?,
        tape.param(&format!("{ep}.w2"))?,
        tape.param(&format!("{ep}.b2"))?,
    );
    let z = tape.affine(x, w1, b1)?;
    let z = tape.relu(z);
    tape.affine(z, w2, b2)
}

/// Hard routing: in layers `< l1` each row goes to its own modality's
/// expert; afterwards every row goes to the multimodal expert.
fn routed_ffn(tape: &mut Tape, cfg: &MoMEConfig, layer: usize, x: Var, tags: &[Modality]) -> Result<Var> {
    if layer >= cfg.l1 {
        return expert_ffn(tape, layer, Expert::Multimodal, x);
    }
    let mut sources = Vec::new();
    let mut picks = vec![(0, 0); tags.len()];
    for m in Modality::ALL {
        let rows: Vec<usize> = (0..tags.len()).filter(|r| tags[*r] == m).collect();
        if rows.is_empty() {
            continue;
        }
        let sub = tape.gather_rows(x, &rows)?;
        let out = expert_ffn(tape, layer, Expert::for_modality(m), sub)?;
        for (pos, r) in rows.iter().enumerate() {
            picks[*r] = (sources.len(), pos);
        }
        sources.push(out);
    }
    tape.gather(&sources, picks)
}

/// `H' = LN(MHSA(H) + H)`, `H = LN(FFN(H')) + H'`.
pub fn mome_layer(tape: &mut Tape, cfg: &MoMEConfig, layer: usize, h: Var, tags: &[Modality], groups: &[usize]) -> Result<Var> {
    let lp = layer_prefix(layer);
    let a = mhsa(tape, cfg, layer, h, groups)?;
    let r = tape.add(a, h)?;
    let (g, b) = (tape.param(&format!("{lp}.ln_attn.gamma"))?, tape.param(&format!("{lp}.ln_attn.beta"))?);
    let h1 = tape.layernorm(r, g, b)?;
    let f = routed_ffn(tape, cfg, layer, h1, tags)?;
    let (g, b) = (tape.param(&format!("{lp}.ln_ffn.gamma"))?, tape.param(&format!("{lp}.ln_ffn.beta"))?);
    let n = tape.layernorm(f, g, b)?;
    tape.add(n, h1)
}

/// Rows of several items, each row tagged with its modality and the item
/// (group) it belongs to.
#[derive(Clone, Debug)]
pub struct StackLayout {
    pub tags: Vec<Modality>,
    pub groups: Vec<usize>,
    pub n_groups: usize,
}

impl StackLayout {
    /// Modality-major layout for `n_groups` items: all rows of the first
    /// modality, then the next; item `g` of modality `k` is row `k·G + g`.
    pub fn modality_major(modalities: &[Modality], n_groups: usize) -> Result<Self> {
        validate_modalities(modalities)?;
        let mut tags = Vec::new();
        let mut groups = Vec::new();
        for m in modalities {
            for g in 0..n_groups {
                tags.push(*m);
                groups.push(g);
            }
        }
        Ok(Self { tags, groups, n_groups })
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups];
        for (r, g) in self.groups.iter().enumerate() {
            out[*g].push(r);
        }
        out
    }
}

fn validate_modalities(ms: &[Modality]) -> Result<()> {
    if ms.is_empty() {
        return Err(invalid("empty modality stack"));
    }
    for (i, m) in ms.iter().enumerate() {
        if ms[..i].contains(m) {
            return Err(invalid(format!("modality {m:?} stacked twice")));
        }
    }
    Ok(())
}

/// Runs every layer over the stacked rows `[R, d_f]`.
pub fn mome_forward(tape: &mut Tape, cfg: &MoMEConfig, rows: Var, layout: &StackLayout) -> Result<Var> {
    let mut h = rows;
    for l in 0..cfg.layers() {
        h = mome_layer(tape, cfg, l, h, &layout.tags, &layout.groups)?;
    }
    Ok(h)
}

/// `e^mm = A_f(AvgPool(MoME(rows)))`, one output row per group.
pub fn fuse_rows(tape: &mut Tape, cfg: &MoMEConfig, rows: Var, layout: &StackLayout) -> Result<Var> {
    if layout.tags.is_empty() {
        return Err(invalid("empty stack"));
    }
    let members = layout.members();
    if members.iter().any(|m| m.is_empty()) {
        return Err(invalid("an item has no rows"));
    }
    let h = mome_forward(tape, cfg, rows, layout)?;
    let pooled = tape.group_mean(h, members)?;
    adapt_on_tape(tape, AdapterSlot::Fusion, pooled)
}

/// One item's adapted modality rows (order as given).
#[derive(Clone, Debug)]
pub struct ModalityStack {
    pub rows: Vec<(Modality, Vec<f64>)>,
}

/// Fuses a single stack with the weights in `store`.
pub fn fuse(store: &ParamStore, cfg: &MoMEConfig, stack: &ModalityStack) -> Result<Vec<f64>> {
    let ms: Vec<Modality> = stack.rows.iter().map(|(m, _)| *m).collect();
    validate_modalities(&ms)?;
    let layout = StackLayout::modality_major(&ms, 1)?;
    let d = cfg.d_f;
    let mut data = Vec::with_capacity(ms.len() * d);
    for (_, v) in &stack.rows {
        if v.len() != d {
            return Err(Error::Shape {
                op: "fuse",
                lhs: vec![v.len()],
                rhs: vec![d],
            });
        }
        data.extend_from_slice(v);
    }
    let mut tape = Tape::inference(store);
    let rows = tape.constant(Tensor::new(vec![ms.len(), d], data)?);
    let out = fuse_rows(&mut tape, cfg, rows, &layout)?;
    Ok(tape.value(out).data().to_vec())
}
