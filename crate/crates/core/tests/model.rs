mod common;

use speeder_core::corpus::{Rule, Split};
use speeder_core::encoders::Modality;
use speeder_core::model::{LossWeights, Sample, Stack};
use speeder_core::mpo::{eval_samples, evaluate, samples};
use speeder_core::numerics::{ParamStore, Tape, Tensor};
use speeder_core::promptlm::is_lora;

use common::{small_dataset, small_model};

fn loss(model: &speeder_core::model::SpeederModel, batch: &[Sample], stack: &Stack) -> f64 {
    let mut tape = Tape::new(&model.params);
    let l = model.batch_loss(&mut tape, batch, stack, LossWeights::default()).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn zero_gates_make_new_modality_invisible() {
    let ds = small_dataset(Rule::LatentMatch, 11);
    let model = small_model(&ds, 11);
    let batch: Vec<Sample> = samples(&ds, Split::Train, 11, &[1]).unwrap().into_iter().take(6).collect();
    let gated = Stack::of(&[Modality::Text, Modality::Vision]);
    let hard_zero = Stack { zeroed: vec![Modality::Vision], ..gated.clone() };
    assert_eq!(loss(&model, &batch, &gated).to_bits(), loss(&model, &batch, &hard_zero).to_bits());
    let a = model.fused_table(&gated).unwrap();
    let b = model.fused_table(&hard_zero).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn installed_base_is_copied_and_frozen() {
    let ds = small_dataset(Rule::LatentMatch, 12);
    let mut model = small_model(&ds, 12);
    let mut base = ParamStore::new();
    for (n, t) in model.params.iter().filter(|(n, _)| n.starts_with("lm.") && !is_lora(n)) {
        base.insert(n, Tensor::full(t.shape(), 0.25));
    }
    model.install_base(&base).unwrap();
    for (n, t) in base.iter() {
        assert_eq!(model.params.require(n).unwrap(), t);
        assert!(model.params.is_frozen(n));
    }
    let mut wrong = ParamStore::new();
    wrong.insert("lm.ln_f.gamma", Tensor::zeros(&[3]));
    assert!(model.install_base(&wrong).is_err());
}

#[test]
fn evaluation_is_deterministic_and_consistent() {
    let ds = small_dataset(Rule::LatentMatch, 13);
    let model = small_model(&ds, 13);
    let valid = eval_samples(&ds, Split::Valid, 13).unwrap();
    let stack = Stack::of(&Modality::ALL);
    let a = evaluate(&model, &valid, &stack).unwrap();
    let b = evaluate(&model, &valid, &stack).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.total, valid.len());
    assert_eq!(a.vhr1, a.valid_ratio * a.hr1);
    assert!(a.ppt.is_some());
}

#[test]
fn evaluation_can_drop_the_proxy_block() {
    let ds = small_dataset(Rule::LatentMatch, 14);
    let mut model = small_model(&ds, 14);
    let stack = Stack::of(&[Modality::Text, Modality::Vision, Modality::Sequential]);
    let s = eval_samples(&ds, Split::Valid, 14).unwrap();
    let with = model.prompt(None, &s[0]).unwrap();
    model.cfg.eval_proxy = false;
    let report = evaluate(&model, &s, &stack).unwrap();
    assert!(report.ppt.is_none());
    assert_eq!(report.total, s.len());
    // Training prompts keep the block regardless.
    assert_eq!(model.prompt(None, &s[0]).unwrap().len(), with.len());
}
