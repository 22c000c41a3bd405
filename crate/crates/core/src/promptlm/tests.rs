use super::*;
use crate::corpus::{generate_catalog, CandidatePool, CatalogConfig};
use crate::encoders::Modality;
use crate::numerics::{check_gradients, ParamStore, Tape, Tensor};
use crate::rng::seeded;
use crate::spae::PptInstance;

fn pool(m: usize) -> CandidatePool {
    CandidatePool {
        candidates: (100..100 + m as u32).collect(),
        positive_index: 1,
    }
}

#[test]
fn slot_count_is_avg_times_items_plus_constant() {
    let cat = generate_catalog(&CatalogConfig::default(), 5, 1).unwrap();
    let vocab = Vocab::new(30, 200);
    for mode in [PromptMode::Speeder, PromptMode::Title] {
        let mut t0s = Vec::new();
        for n in [9usize, 13, 20] {
            let hist: Vec<u32> = (0..n as u32).collect();
            for proxy in [false, true] {
                let ppt = PptInstance::new(&hist, [0, 4, 2]).unwrap();
                let p = assemble_prompt(&vocab, Some(&cat), &hist, &pool(5), proxy.then_some(&ppt), mode, 5, 20).unwrap();
                let avg = if mode == PromptMode::Speeder { 2 } else { 20 };
                let t0 = if proxy { 22 } else { 12 };
                assert_eq!(p.len(), avg * (n + 5) + t0, "{mode:?} n={n} proxy={proxy}");
                assert_eq!(p.t0(), t0);
                assert_eq!(p.targets.len(), 1 + proxy as usize);
                t0s.push((proxy, p.t0()));
            }
        }
        assert!(t0s.iter().filter(|(p, _)| *p).all(|(_, t)| *t == 22));
    }
}

#[test]
fn targets_name_answer_and_index() {
    let vocab = Vocab::new(30, 10);
    let hist: Vec<u32> = (0..9).collect();
    let ppt = PptInstance::new(&hist, [0, 1, 5]).unwrap();
    let p = assemble_prompt(&vocab, None, &hist, &pool(5), Some(&ppt), PromptMode::Speeder, 5, 20).unwrap();
    assert_eq!(p.targets, vec![vocab.yes(), vocab.index_token(2).unwrap()]);
    assert_eq!(p.embed_slots().count(), 9 + 3 + 5);
}

fn lm_store(cfg: &LmConfig, vocab: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_lm(&mut s, cfg, vocab, &mut seeded(seed, &[])).unwrap();
    s
}

fn run(store: &ParamStore, cfg: &LmConfig, x: &Tensor) -> Tensor {
    let mut t = Tape::inference(store);
    let i = t.constant(x.clone());
    let h = decode(&mut t, cfg, i).unwrap();
    let l = logits_at(&mut t, h, &[x.rows() - 1]).unwrap();
    t.value(l).clone()
}

#[test]
fn zero_lora_b_and_rank_zero_equal_base() {
    let cfg = LmConfig::default();
    let base_cfg = LmConfig { lora_rank: 0, ..cfg.clone() };
    let with = lm_store(&cfg, 50, 3);
    let mut base = with.clone();
    let lora: Vec<String> = base.names().filter(|n| is_lora(n)).map(String::from).collect();
    assert_eq!(lora.len(), 2 * 4 * 2);
    for n in &lora {
        base.remove(n);
    }
    let x = Tensor::uniform(&[7, 64], 1.0, &mut seeded(4, &[]));
    assert!(run(&with, &cfg, &x).bit_eq(&run(&base, &base_cfg, &x)));
}

#[test]
fn oversized_prompt_is_rejected() {
    let cfg = LmConfig { context: 8, ..Default::default() };
    let s = lm_store(&cfg, 20, 1);
    let mut t = Tape::inference(&s);
    let x = t.constant(Tensor::zeros(&[9, 64]));
    assert!(decode(&mut t, &cfg, x).is_err());
    let e = t.constant(Tensor::zeros(&[0, 64]));
    assert!(decode(&mut t, &cfg, e).is_err());
}

#[test]
fn lora_gradients_match_finite_differences() {
    let cfg = LmConfig { d: 16, heads: 2, d_ffn: 32, ..Default::default() };
    let mut s = lm_store(&cfg, 12, 7);
    let mut rng = seeded(8, &[]);
    // Non-zero B so A receives gradient too.
    let names: Vec<String> = s.names().filter(|n| is_lora(n)).map(String::from).collect();
    for n in &names {
        let shape = s.require(n).unwrap().shape().to_vec();
        s.insert(n.clone(), Tensor::uniform(&shape, 0.3, &mut rng));
    }
    let x = Tensor::uniform(&[6, 16], 1.0, &mut rng);
    s.set_trainable(&["lm.*.lora_*".to_string()]);
    let report = check_gradients(&s, &names, 1e-5, 20, 1, |t| {
        let i = t.constant(x.clone());
        let h = decode(t, &cfg, i)?;
        let l = logits_at(t, h, &[3, 5])?;
        t.cross_entropy(l, &[2, 7], &[1.0, 1.0])
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.per_param);
}

#[test]
fn zero_gate_outputs_exact_zero_and_text_is_ungated() {
    let mut s = ParamStore::new();
    init_gates(&mut s, 8);
    let e: Vec<f64> = (0..8).map(|i| i as f64 - 3.3).collect();
    for m in [Modality::Vision, Modality::Sequential] {
        assert!(apply_gate(&s, GateKind::Tanh, m, &e).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(apply_gate(&s, GateKind::None, m, &e).unwrap(), e);
    }
    assert!(apply_gate(&s, GateKind::Tanh, Modality::Text, &e).is_err());
    assert!(apply_gate(&s, GateKind::Tanh, Modality::Vision, &e[..4]).is_err());
}

#[test]
fn gate_gradients_match_finite_differences() {
    let mut s = ParamStore::new();
    init_gates(&mut s, 6);
    let mut rng = seeded(2, &[]);
    for n in ["gate.vision.w", "gate.vision.b"] {
        let shape = s.require(n).unwrap().shape().to_vec();
        s.insert(n, Tensor::uniform(&shape, 0.5, &mut rng));
    }
    let x = Tensor::uniform(&[3, 6], 1.0, &mut rng);
    let probe = Tensor::uniform(&[3, 6], 1.0, &mut rng);
    let names = vec!["gate.vision.w".to_string(), "gate.vision.b".to_string()];
    for kind in [GateKind::Tanh, GateKind::Relu] {
        let report = check_gradients(&s, &names, 1e-5, 36, 1, |t| {
            let e = t.constant(x.clone());
            let g = apply_gate_on_tape(t, kind, Modality::Vision, e)?;
            t.weighted_sum(g, probe.clone())
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{kind:?} {:?}", report.per_param);
    }
}

#[test]
fn greedy_flags_ties() {
    assert_eq!(greedy(&[0.1, 0.5, 0.2]), Some(1));
    assert_eq!(greedy(&[0.5, 0.5, 0.2]), None);
    assert_eq!(greedy(&[f64::NAN, 0.1]), None);
}
