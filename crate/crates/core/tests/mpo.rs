mod common;

use speeder_core::corpus::{Rule, Split};
use speeder_core::encoders::Modality;
use speeder_core::model::{LossWeights, ModelConfig, Sample, Stack};
use speeder_core::mpo::{
    build_stage_plan, load_training_checkpoint, restore_model, samples, LogRecord, TrainConfig, Trainer, Variant,
};
use speeder_core::numerics::{glob_match, Tape, Tensor};
use speeder_core::promptlm::TOK_EMB;

use common::{short_schedule, small_dataset, small_model};

fn matches(patterns: &[String], name: &str) -> bool {
    patterns.iter().any(|p| glob_match(p, name))
}

#[test]
fn stage_plans_introduce_modalities_progressively() {
    let cfg = ModelConfig::default();
    let plans: Vec<_> = (1..=3).map(|s| build_stage_plan(s, Variant::Full, &cfg, 1).unwrap()).collect();
    assert_eq!(plans[0].modalities, vec![Modality::Text]);
    assert_eq!(plans[1].modalities, vec![Modality::Text, Modality::Vision]);
    assert_eq!(plans[2].modalities, Modality::ALL.to_vec());
    assert!(plans[0].gates_active.is_empty());
    assert_eq!(plans[1].gates_active, vec![Modality::Vision]);

    let t = |k: usize, name: &str| matches(&plans[k].trainable, name);
    assert!(t(0, "mome.layer0.expert.textual.w1"));
    assert!(!t(0, "mome.layer0.expert.visual.w1"));
    assert!(!t(0, "mome.layer0.mhsa.w_q"));
    assert!(t(1, "mome.layer0.expert.visual.w1") && t(1, "mome.layer0.mhsa.w_q"));
    assert!(!t(1, "mome.layer0.expert.sequential.w1"));
    assert!(t(2, "mome.layer0.expert.sequential.w1"));
    for k in 0..3 {
        assert!(t(k, "lm.layer0.attn.q.lora_a"));
        assert!(!t(k, "lm.layer0.attn.w_q"), "base decoder weights stay frozen");
        assert!(!t(k, "encoders.seq.item_emb"));
    }
    assert!(build_stage_plan(4, Variant::Full, &cfg, 1).is_err());
}

#[test]
fn ablations_skip_stages_and_modalities() {
    let cfg = ModelConfig::default();
    let tc = |v| TrainConfig { variant: v, ..Default::default() };
    let ids = |v| tc(v).plans(&cfg).unwrap().iter().map(|p| p.stage_id).collect::<Vec<_>>();
    assert_eq!(ids(Variant::Full), vec![1, 2, 3]);
    assert_eq!(ids(Variant::WoMpoS1), vec![2, 3]);
    assert_eq!(ids(Variant::WoMpoS1s2), vec![3]);
    let wo_vision = tc(Variant::WoVision).plans(&cfg).unwrap();
    assert!(wo_vision.iter().all(|p| !p.modalities.contains(&Modality::Vision)));
}

#[test]
fn gradients_reach_only_the_stage_trainable_set() {
    let ds = small_dataset(Rule::LatentMatch, 1);
    let mut model = small_model(&ds, 1);
    let batch: Vec<Sample> = samples(&ds, Split::Train, 1, &[9]).unwrap().into_iter().take(4).collect();
    for stage in 1..=3 {
        let plan = build_stage_plan(stage, Variant::Full, &model.cfg, 1).unwrap();
        model.params.set_trainable(&plan.trainable);
        let grads = {
            let mut tape = Tape::new(&model.params);
            let l = model.batch_loss(&mut tape, &batch, &plan.stack(), LossWeights::default()).unwrap();
            tape.backward(l).unwrap()
        };
        let trainable = model.params.trainable_names();
        assert!(!grads.is_empty());
        for name in grads.keys() {
            assert!(trainable.contains(name), "stage {stage}: gradient for frozen {name}");
        }
        if stage == 1 {
            assert!(grads.keys().all(|n| !n.contains("expert.visual") && !n.starts_with("adapter.vision")));
        }
    }
}

#[test]
fn uniform_logits_cost_log_vocab_per_target() {
    let ds = small_dataset(Rule::LatentMatch, 2);
    let mut model = small_model(&ds, 2);
    let shape = model.params.require(TOK_EMB).unwrap().shape().to_vec();
    *model.params.get_mut(TOK_EMB).unwrap() = Tensor::zeros(&shape);
    let batch: Vec<Sample> = samples(&ds, Split::Train, 2, &[9]).unwrap().into_iter().take(3).collect();
    let mut tape = Tape::new(&model.params);
    let l = model.batch_loss(&mut tape, &batch, &Stack::of(&[Modality::Text]), LossWeights::default()).unwrap();
    let expect = 2.0 * (model.vocab.len() as f64).ln();
    let got = tape.value(l).data()[0];
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

fn run(seed: u64, cfg: &TrainConfig) -> (Vec<LogRecord>, speeder_core::mpo::TrainOutcome) {
    let ds = small_dataset(Rule::LatentMatch, 3);
    let mut model = small_model(&ds, seed);
    let mut tr = Trainer::new(&ds, cfg, seed);
    let out = tr.run(&mut model, None).unwrap();
    (out.log.clone(), out)
}

fn strip_time(log: &[LogRecord]) -> Vec<LogRecord> {
    log.iter().map(|r| LogRecord { seconds: 0.0, ..r.clone() }).collect()
}

#[test]
fn training_is_deterministic_and_respects_freezes() {
    let cfg = short_schedule();
    let (log_a, a) = run(4, &cfg);
    let (log_b, b) = run(4, &cfg);
    assert_eq!(strip_time(&log_a), strip_time(&log_b));
    for ((sa, pa), (_, pb)) in a.stage_params.iter().zip(&b.stage_params) {
        assert!(pa.diff(pb).is_empty(), "stage {sa} weights differ between identical runs");
    }
    assert_eq!(a.audits.len(), 3);
    for audit in &a.audits {
        assert!(audit.frozen_changed.is_empty());
        assert!(!audit.changed.is_empty());
        assert!(audit.changed.iter().all(|n| !n.starts_with("encoders.seq.")));
        assert!(audit.changed.iter().all(|n| !n.starts_with("lm.") || n.contains("lora")));
    }
    assert!(a.audits[0].changed.iter().all(|n| !n.contains("visual") && !n.contains("sequential")));
    assert!(a.audits[1].changed.iter().all(|n| !n.contains("sequential")));
    let (_, c) = run(5, &cfg);
    assert!(!a.stage_params[2].1.diff(&c.stage_params[2].1).is_empty());
}

#[test]
fn resuming_mid_stage_reproduces_the_run() {
    let ds = small_dataset(Rule::LatentMatch, 6);
    let cfg = TrainConfig { stage_epochs: [1, 2, 1], eval_limit: 8, ..Default::default() };
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("full");
    let mid = tmp.path().join("mid.ckpt");

    let mut model = small_model(&ds, 6);
    let full = {
        let mut tr = Trainer::new(&ds, &cfg, 6);
        tr.out_dir = Some(dir.clone());
        let (last, mid) = (dir.join("last.ckpt"), mid.clone());
        // The record of an epoch is emitted before that epoch's checkpoint,
        // so at stage 2 epoch 1 `last.ckpt` still holds stage 2 epoch 0.
        tr.on_record = Some(Box::new(move |r: &LogRecord| {
            if r.stage == 2 && r.epoch == 1 {
                std::fs::copy(&last, &mid).unwrap();
            }
        }));
        tr.run(&mut model, None).unwrap()
    };

    let (meta, params, point) = load_training_checkpoint(&mid).unwrap();
    assert_eq!((meta.stage, point.epochs_done), (2, 1));
    assert!(point.optimizer.is_some());
    let mut resumed = restore_model(&ds, &model.cfg, params, 6).unwrap();
    let mut tr = Trainer::new(&ds, &cfg, 6);
    let rest = tr.run(&mut resumed, Some(point)).unwrap();
    assert_eq!(strip_time(&rest.log), strip_time(&full.log[2..]));
    assert!(resumed.params.diff(&model.params).is_empty());
    for (name, t) in model.params.iter() {
        assert_eq!(t, resumed.params.require(name).unwrap(), "{name}");
    }
}
