use rand::Rng;

use super::Modality;
use crate::error::{Error, Result};
use crate::numerics::{init_linear, ParamStore, Tape, Tensor, Var};

/// Adapter slots: the three modality adapters plus the fusion adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdapterSlot {
    Modality(Modality),
    Fusion,
}

impl AdapterSlot {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterSlot::Modality(m) => m.tag(),
            AdapterSlot::Fusion => "fusion",
        }
    }

    pub fn weight(self) -> String {
        format!("adapter.{}.w", self.tag())
    }

    pub fn bias(self) -> String {
        format!("adapter.{}.b", self.tag())
    }
}

/// Pure affine adapter with fan-in uniform weights and zero bias.
pub fn init_adapter<R: Rng + ?Sized>(store: &mut ParamStore, slot: AdapterSlot, in_dim: usize, out_dim: usize, rng: &mut R) {
    store.insert(slot.weight(), init_linear(in_dim, out_dim, rng));
    store.insert(slot.bias(), Tensor::zeros(&[out_dim]));
}

pub fn adapt_on_tape(tape: &mut Tape, slot: AdapterSlot, x: Var) -> Result<Var> {
    let w = tape.param(&slot.weight())?;
    let b = tape.param(&slot.bias())?;
    tape.affine(x, w, b)
}

/// Applies one adapter to a single vector outside any tape.
pub fn adapt(store: &ParamStore, slot: AdapterSlot, p: &[f64]) -> Result<Vec<f64>> {
    let w = store.require(&slot.weight())?;
    let b = store.require(&slot.bias())?;
    if p.len() != w.rows() {
        return Err(Error::Shape {
            op: "adapt",
            lhs: vec![p.len()],
            rhs: w.shape().to_vec(),
        });
    }
    let mut out = b.data().to_vec();
    for (i, x) in p.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row_slice(i)) {
            *o += x * wv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_in_zero_out_and_deterministic() {
        let mut s = ParamStore::new();
        let slot = AdapterSlot::Modality(Modality::Text);
        init_adapter(&mut s, slot, 48, 64, &mut seeded(1, &[]));
        assert!(adapt(&s, slot, &[0.0; 48]).unwrap().iter().all(|v| *v == 0.0));
        let p: Vec<f64> = (0..48).map(|i| i as f64 * 0.1).collect();
        let a = adapt(&s, slot, &p).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, adapt(&s, slot, &p).unwrap());
        assert!(matches!(adapt(&s, slot, &[1.0; 47]), Err(Error::Shape { op: "adapt", .. })));
    }

    #[test]
    fn tape_and_direct_paths_agree() {
        let mut s = ParamStore::new();
        let slot = AdapterSlot::Fusion;
        init_adapter(&mut s, slot, 8, 4, &mut seeded(2, &[]));
        s.get_mut(&slot.bias()).unwrap().data_mut()[1] = 0.25;
        let p = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 3.0];
        let mut t = Tape::inference(&s);
        let x = t.constant(Tensor::row(p.clone()));
        let y = adapt_on_tape(&mut t, slot, x).unwrap();
        let direct = adapt(&s, slot, &p).unwrap();
        for (a, b) in t.value(y).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
