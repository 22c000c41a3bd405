//! Central finite-difference checks against the tape's reverse sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-12)` per parameter.
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of `loss_fn` with central differences of
/// step `h` for every trainable parameter in `names`, probing at most
/// `max_coords` random coordinates per tensor.
pub fn check_gradients<F>(
    store: &ParamStore,
    names: &[String],
    h: f64,
    max_coords: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference(s);
        let l = loss_fn(&mut tape)?;
        Ok(tape.value(l).data()[0])
    };
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss_fn(&mut tape)?;
        tape.backward(l)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut coordinates = 0;
    for name in names {
        let len = store.require(name)?.len();
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(max_coords);
        let grad = analytic.get(name);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = work.require(name)?.data()[i];
            work.get_mut(name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.map(|g| g.data()[i]).unwrap_or(0.0);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            coordinates += 1;
        }
        let rel = diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-12);
        per_param.push((name.clone(), rel));
    }
    Ok(GradCheckReport {
        per_param,
        coordinates,
    })
}
