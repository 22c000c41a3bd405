//! Dense tensors, a reverse-mode tape, parameter storage, Adam, and the
//! checkpoint container.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use optim::{Adam, LrSchedule};
pub use params::{glob_match, init_linear, ParamStore};
pub use tape::{AttnMask, Gradients, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;


#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::detached();
        let x = t.constant(Tensor::row(vec![0.0; 3]));
        let y = t.softmax_rows(x);
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gate_kills_any_vector() {
        let mut t = Tape::detached();
        let z = t.constant(Tensor::row(vec![0.0; 4]));
        let g = t.tanh(z);
        let v = t.constant(Tensor::row(vec![3.0, -1.0, 7.5, 1e6]));
        let out = t.mul(g, v).unwrap();
        assert!(t.value(out).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let mut t = Tape::detached();
        let x = t.constant(Tensor::row(vec![2.5; 8]));
        let g = t.constant(Tensor::row(vec![1.0; 8]));
        let b = t.constant(Tensor::row(vec![0.0; 8]));
        let y = t.layernorm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn scalar_product_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let w = t.param("w").unwrap();
        let y = t.matmul(x, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g["w"].data(), &[2.0]);
    }

    #[test]
    fn frozen_only_graph_has_no_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![1.0, 2.0]));
        store.freeze_all();
        let mut t = Tape::new(&store);
        let w = t.param("w").unwrap();
        let s = t.sum(w).unwrap();
        assert!(t.backward(s).unwrap().is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![1.0, 2.0]));
        let mut t = Tape::new(&store);
        let w = t.param("w").unwrap();
        assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::detached();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert("x", Tensor::uniform(&[5, 8], 1.0, &mut rng));
        s.insert("y", Tensor::uniform(&[5, 8], 1.0, &mut rng));
        s.insert("w", Tensor::uniform(&[8, 8], 0.5, &mut rng));
        s.insert("b", Tensor::uniform(&[8], 0.5, &mut rng));
        s.insert("g", Tensor::uniform(&[8], 1.0, &mut rng));
        s.insert("probe", Tensor::uniform(&[5, 8], 1.0, &mut rng));
        s
    }

    fn all_names(s: &ParamStore) -> Vec<String> {
        s.names().filter(|n| *n != "probe").map(String::from).collect()
    }

    /// Every differentiable op, composed with a random linear probe so the
    /// loss depends on every output coordinate.
    #[test]
    fn each_op_passes_finite_differences() {
        type Build = fn(&mut Tape) -> crate::Result<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul+bias", |t| {
                let (x, w, b) = (t.param("x")?, t.param("w")?, t.param("b")?);
                t.affine(x, w, b)
            }),
            ("matmul_t", |t| {
                let (x, y) = (t.param("x")?, t.param("y")?);
                let s = t.matmul_t(x, y)?;
                t.matmul(s, y)
            }),
            ("mul/sub/add", |t| {
                let (x, y) = (t.param("x")?, t.param("y")?);
                let m = t.mul(x, y)?;
                let s = t.sub(m, x)?;
                t.add(s, y)
            }),
            ("relu/tanh/scale", |t| {
                let x = t.param("x")?;
                let r = t.relu(x);
                let th = t.tanh(r);
                Ok(t.scale(th, -1.7))
            }),
            ("softmax", |t| {
                let x = t.param("x")?;
                Ok(t.softmax_rows(x))
            }),
            ("layernorm", |t| {
                let (x, g, b) = (t.param("x")?, t.param("g")?, t.param("b")?);
                t.layernorm(x, g, b)
            }),
            ("concat/slice/gather", |t| {
                let (x, y) = (t.param("x")?, t.param("y")?);
                let c = t.concat_cols(&[x, y])?;
                let s = t.slice_cols(c, 4, 8)?;
                let r = t.concat_rows(&[s, x])?;
                let g = t.gather(&[r, y], vec![(0, 9), (1, 0), (0, 0), (0, 3), (1, 4)])?;
                Ok(g)
            }),
            ("group_mean", |t| {
                let x = t.param("x")?;
                let p = t.group_mean(x, vec![vec![0, 2], vec![1], vec![3, 4, 0], vec![1, 1], vec![4]])?;
                let a = t.avg_pool(x)?;
                let a5 = t.gather_rows(a, &[0, 0, 0, 0, 0])?;
                t.add(p, a5)
            }),
            ("attention causal + rope", |t| {
                let (x, y, w) = (t.param("x")?, t.param("y")?, t.param("w")?);
                let q = t.matmul(x, w)?;
                let q = t.rope(q, 2)?;
                let k = t.rope(y, 2)?;
                t.attention(q, k, x, 2, &AttnMask::Causal)
            }),
            ("attention groups", |t| {
                let (x, y) = (t.param("x")?, t.param("y")?);
                t.attention(x, y, y, 4, &AttnMask::Groups(vec![0, 1, 0, 1, 2]))
            }),
        ];
        for (label, build) in cases {
            let store = random_store(11);
            let names = all_names(&store);
            let loss = |t: &mut Tape| -> crate::Result<Var> {
                let out = build(t)?;
                let probe = t.param("probe")?;
                let probe_v = t.value(probe).clone();
                let shaped = if t.value(out).len() == probe_v.len() {
                    probe_v
                } else {
                    Tensor::full(t.value(out).shape(), 0.37)
                };
                t.weighted_sum(out, shaped)
            };
            let report = check_gradients(&store, &names, 1e-5, 40, 3, loss).unwrap();
            assert!(report.max_rel_error() < 1e-4, "{label}: {:?}", report.per_param);
        }
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let store = random_store(5);
        let names = vec!["x".to_string(), "w".to_string()];
        let report = check_gradients(&store, &names, 1e-5, 40, 1, |t| {
            let (x, w) = (t.param("x")?, t.param("w")?);
            let logits = t.matmul(x, w)?;
            t.cross_entropy(logits, &[1, 0, 7, 3, 3], &[1.0, 0.5, 1.0, 2.0, 1.0])
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.per_param);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let mut t = Tape::detached();
        let l = t.constant(Tensor::zeros(&[2, 10]));
        let loss = t.cross_entropy(l, &[3, 4], &[1.0, 1.0]).unwrap();
        assert!((t.value(loss).data()[0] - 2.0 * (10f64).ln()).abs() < 1e-12);
    }
}
