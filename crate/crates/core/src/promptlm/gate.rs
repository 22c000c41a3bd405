use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{invalid, Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    /// `tanh(A(e)) ⊙ e`
    Tanh,
    /// `relu(A(e)) ⊙ e`
    Relu,
    /// Identity: no gating.
    None,
}

pub fn gate_weight(m: Modality) -> String {
    format!("gate.{}.w", m.tag())
}

pub fn gate_bias(m: Modality) -> String {
    format!("gate.{}.b", m.tag())
}

fn check(m: Modality) -> Result<()> {
    if m == Modality::Text {
        return Err(invalid("the textual modality is never gated"));
    }
    Ok(())
}

/// Zero-initialized single-layer adapters for the vision and sequential
/// gates, so every gate starts closed.
pub fn init_gates(store: &mut ParamStore, d: usize) {
    for m in [Modality::Vision, Modality::Sequential] {
        store.insert(gate_weight(m), Tensor::zeros(&[d, d]));
        store.insert(gate_bias(m), Tensor::zeros(&[d]));
    }
}

pub fn apply_gate_on_tape(tape: &mut Tape, kind: GateKind, m: Modality, e: Var) -> Result<Var> {
    check(m)?;
    if kind == GateKind::None {
        return Ok(e);
    }
    let w = tape.param(&gate_weight(m))?;
    let b = tape.param(&gate_bias(m))?;
    let a = tape.affine(e, w, b)?;
    let g = match kind {
        GateKind::Tanh => tape.tanh(a),
        GateKind::Relu => tape.relu(a),
        GateKind::None => unreachable!(),
    };
    tape.mul(g, e)
}

/// Gates a single vector outside any tape.
pub fn apply_gate(store: &ParamStore, kind: GateKind, m: Modality, e: &[f64]) -> Result<Vec<f64>> {
    check(m)?;
    let mut tape = Tape::inference(store);
    let x = tape.constant(Tensor::row(e.to_vec()));
    let out = apply_gate_on_tape(&mut tape, kind, m, x).map_err(|err| match err {
        Error::Shape { .. } => Error::Shape {
            op: "apply_gate",
            lhs: vec![e.len()],
            rhs: store.get(&gate_weight(m)).map(|t| t.shape().to_vec()).unwrap_or_default(),
        },
        other => other,
    })?;
    Ok(tape.value(out).data().to_vec())
}
