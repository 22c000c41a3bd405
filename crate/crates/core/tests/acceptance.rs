//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! straight to stdout (visible even when the harness captures output).
//! Tests take a shared lock so timing checks are not skewed by each other.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speeder_core::config::RunConfig;
use speeder_core::corpus::{generate_catalog, generate_dataset, CandidatePool, CatalogConfig, Rule, Split};
use speeder_core::costmodel::{
    cost_curve, empirical_counters, improvement_infer, improvement_train, log_grid, train_cost_exact, train_cost_expanded_exact,
    CostParams, EmpiricalConfig,
};
use speeder_core::encoders::{init_adapter, AdapterSlot, Modality};
use speeder_core::eval::{score, score_counts, Prediction};
use speeder_core::model::{LossWeights, SpeederModel, Stack};
use speeder_core::mome::{fuse_rows, init_mome, mome_forward, mome_layer, MoMEConfig, StackLayout};
use speeder_core::mpo::{build_model, build_stage_plan, eval_samples, evaluate, model_base, samples, TrainConfig, Trainer, Variant};
use speeder_core::numerics::{check_gradients, glob_match, load_checkpoint, ParamStore, Tape, Tensor};
use speeder_core::promptlm::{
    apply_gate_on_tape, assemble_prompt, decode, init_gates, init_lm, is_lora, logits_at, GateKind, LmConfig, PromptMode, Vocab,
};
use speeder_core::rng::seeded;
use speeder_core::spae::{compose_on_tape, init_ppl, PptInstance, PPL_NAME};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
    pass
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[test]
fn closed_form_limits() {
    let _g = serial();
    let t = Instant::now();
    let (base, ours) = (CostParams::title_baseline(1), CostParams::speeder(1));
    assert_eq!((base.avg_token, ours.avg_token, base.t_out, ours.t_out), (20, 2, 20, 1));
    let it = improvement_train(&base, &ours, 100_000_000).unwrap();
    let ii = improvement_infer(&base, &ours, 100_000_000).unwrap();
    let curve = cost_curve(&base, &ours, &log_grid(1, 100_000_000, 1000)).unwrap();
    let monotone = curve.windows(2).all(|w| w[1].i_train >= w[0].i_train && w[1].i_infer >= w[0].i_infer);
    let el = t.elapsed();
    let pass = (it - 99.0).abs() / 99.0 < 0.01 && (ii - 199.0).abs() / 199.0 < 0.01 && monotone && el < Duration::from_secs(1);
    assert!(verdict(
        "closed-form limits",
        pass,
        format!("I_train(1e8)={it:.4} I_infer(1e8)={ii:.4} monotone={monotone} over {} points, {:.3}s", curve.len(), secs(el))
    ));
}

#[test]
fn expansion_identity() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut agree = 0;
    for _ in 0..1000 {
        let p = CostParams {
            n: rng.gen_range(1..1_000_000),
            m: rng.gen_range(1..100),
            avg_token: rng.gen_range(1..64),
            t0: rng.gen_range(0..1000),
            d: rng.gen_range(1..8192),
            layers: rng.gen_range(1..128),
            batch: rng.gen_range(1..512),
            iters: rng.gen_range(1..100_000),
            ..CostParams::speeder(1)
        };
        agree += usize::from(train_cost_exact(&p) == train_cost_expanded_exact(&p));
    }
    let el = t.elapsed();
    assert!(verdict(
        "expanded training cost equals direct substitution",
        agree == 1000 && el < Duration::from_secs(1),
        format!("{agree}/1000 exact, {:.3}s", secs(el))
    ));
}

#[test]
fn prompt_length_is_constructive() {
    let _g = serial();
    let t = Instant::now();
    let cat = generate_catalog(&CatalogConfig::default(), 5, 3).unwrap();
    let vocab = Vocab::new(20, cat.title_vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    let mut exact = 0;
    for mode in [PromptMode::Speeder, PromptMode::Title] {
        let avg = if mode == PromptMode::Speeder { 2 } else { 20 };
        for _ in 0..100 {
            let n = rng.gen_range(3..=20);
            let mut ids: Vec<u32> = (0..cat.len() as u32).collect();
            for i in 0..n + 5 {
                let j = rng.gen_range(i..ids.len());
                ids.swap(i, j);
            }
            let history = ids[..n].to_vec();
            let pool = CandidatePool { candidates: ids[n..n + 5].to_vec(), positive_index: rng.gen_range(0..5) };
            let with_proxy = rng.gen_bool(0.5);
            let ppt = with_proxy.then(|| {
                let mut pos: Vec<usize> = (0..n).collect();
                for i in 0..3 {
                    let j = rng.gen_range(i..n);
                    pos.swap(i, j);
                }
                PptInstance::new(&history, [pos[0], pos[1], pos[2]]).unwrap()
            });
            let p = assemble_prompt(&vocab, Some(&cat), &history, &pool, ppt.as_ref(), mode, 5, 20).unwrap();
            let t0 = if with_proxy { 22 } else { 12 };
            checked += 1;
            exact += usize::from(p.len() == avg * (n + 5) + t0);
        }
    }
    let el = t.elapsed();
    assert!(verdict(
        "prompt length N = Avg_token(n+m)+t0",
        exact == checked && el < Duration::from_secs(1),
        format!("{exact}/{checked} prompts exact, {:.3}s", secs(el))
    ));
}

#[test]
fn empirical_scaling_direction() {
    let _g = serial();
    let t = Instant::now();
    let pts = empirical_counters(&EmpiricalConfig::default()).unwrap();
    let series = |mode| pts.iter().filter(|p| p.mode == mode).collect::<Vec<_>>();
    let (title, ours) = (series(PromptMode::Title), series(PromptMode::Speeder));
    assert_eq!(title.len(), 4);
    let mut faster = true;
    let mut lines = Vec::new();
    for k in 1..title.len() {
        let dm_t = title[k].macs as f64 - title[k - 1].macs as f64;
        let dm_s = ours[k].macs as f64 - ours[k - 1].macs as f64;
        let ds_t = title[k].seconds - title[k - 1].seconds;
        let ds_s = ours[k].seconds - ours[k - 1].seconds;
        faster &= dm_t > dm_s && ds_t > ds_s && dm_s > 0.0;
        lines.push(format!("n {}→{}: ΔMAC {:.2e} vs {:.2e}, Δt {:.4}s vs {:.4}s", title[k - 1].n, title[k].n, dm_t, dm_s, ds_t, ds_s));
    }
    let el = t.elapsed();
    assert!(verdict(
        "title-mode cost grows faster than speeder-mode",
        faster && el < Duration::from_secs(300),
        format!("{}; {:.1}s", lines.join("; "), secs(el))
    ));
}

/// Distance between two positions by walking the sequence one step at a time.
fn walk(from: usize, to: usize) -> usize {
    let mut steps = 0;
    let mut at = from;
    while at != to {
        at = if at < to { at + 1 } else { at - 1 };
        steps += 1;
    }
    steps
}

#[test]
fn proxy_labeler_matches_enumeration() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut total, mut agree) = (0usize, 0usize);
    for _ in 0..1000 {
        let n = rng.gen_range(3..=20);
        let mut seq: Vec<u32> = (0..500).collect();
        seq.shuffle(&mut rng);
        seq.truncate(n);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    if a == b || b == c || a == c {
                        continue;
                    }
                    // Sampled order as drawn.
                    let inst = PptInstance::new(&seq, [a, b, c]).unwrap();
                    total += 1;
                    agree += usize::from(inst.label == (walk(a, b) <= walk(b, c)) && inst.items == [seq[a], seq[b], seq[c]]);
                    // Sorted order: only ascending triples.
                    if a < b && b < c {
                        total += 1;
                        agree += usize::from(inst.label == (b - a <= c - b));
                    }
                }
            }
        }
    }
    let el = t.elapsed();
    assert!(verdict(
        "proxy labels match brute-force enumeration",
        agree == total && el < Duration::from_secs(10),
        format!("{agree}/{total} agree, {:.2}s", secs(el))
    ));
}

#[test]
fn gradient_correctness() {
    let _g = serial();
    let t = Instant::now();
    let mut errs = Vec::new();

    // MoME block with the fusion adapter.
    let cfg = MoMEConfig { d_f: 8, heads: 2, l1: 1, l2: 1, d_ffn: 12 };
    let mut s = ParamStore::new();
    let mut rng = seeded(1, &[]);
    init_mome(&mut s, &cfg, &mut rng).unwrap();
    init_adapter(&mut s, AdapterSlot::Fusion, 8, 6, &mut rng);
    let names: Vec<String> = s.names().map(String::from).collect();
    let layout = StackLayout::modality_major(&Modality::ALL, 2).unwrap();
    let x = Tensor::uniform(&[6, 8], 1.0, &mut rng);
    let probe = Tensor::uniform(&[2, 6], 1.0, &mut rng);
    let r = check_gradients(&s, &names, 1e-5, 12, 1, |t| {
        let rows = t.constant(x.clone());
        let e = fuse_rows(t, &cfg, rows, &layout)?;
        t.weighted_sum(e, probe.clone())
    })
    .unwrap();
    errs.push(("MoME", r.max_rel_error()));

    // tanh gate with non-zero parameters.
    let mut s = ParamStore::new();
    init_gates(&mut s, 6);
    for n in ["gate.vision.w", "gate.vision.b"] {
        let shape = s.require(n).unwrap().shape().to_vec();
        s.insert(n, Tensor::uniform(&shape, 0.5, &mut rng));
    }
    let names = vec!["gate.vision.w".to_string(), "gate.vision.b".to_string()];
    let x = Tensor::uniform(&[3, 6], 1.0, &mut rng);
    let probe = Tensor::uniform(&[3, 6], 1.0, &mut rng);
    let r = check_gradients(&s, &names, 1e-5, 36, 2, |t| {
        let e = t.constant(x.clone());
        let g = apply_gate_on_tape(t, GateKind::Tanh, Modality::Vision, e)?;
        t.weighted_sum(g, probe.clone())
    })
    .unwrap();
    errs.push(("tanh gate", r.max_rel_error()));

    // Position prompts feeding the decoder.
    let lm = LmConfig { d: 16, heads: 2, d_ffn: 32, rotary_dims: 4, ..Default::default() };
    let mut s = ParamStore::new();
    init_lm(&mut s, &lm, 12, &mut rng).unwrap();
    init_ppl(&mut s, 8, 16);
    s.insert(PPL_NAME, Tensor::uniform(&[8, 16], 0.3, &mut rng));
    let x = Tensor::uniform(&[5, 16], 1.0, &mut rng);
    let r = check_gradients(&s, &[PPL_NAME.to_string()], 1e-5, 40, 3, |t| {
        let e = t.constant(x.clone());
        let c = compose_on_tape(t, e)?;
        let h = decode(t, &lm, c)?;
        let l = logits_at(t, h, &[2, 4])?;
        t.cross_entropy(l, &[1, 7], &[1.0, 1.0])
    })
    .unwrap();
    errs.push(("PPL", r.max_rel_error()));

    // LoRA factors, both non-zero so each receives gradient.
    let lora: Vec<String> = s.names().filter(|n| is_lora(n)).map(String::from).collect();
    for n in &lora {
        let shape = s.require(n).unwrap().shape().to_vec();
        s.insert(n.clone(), Tensor::uniform(&shape, 0.3, &mut rng));
    }
    s.set_trainable(&["lm.*.lora_*".to_string()]);
    let r = check_gradients(&s, &lora, 1e-5, 20, 4, |t| {
        let i = t.constant(x.clone());
        let h = decode(t, &lm, i)?;
        let l = logits_at(t, h, &[3, 4])?;
        t.cross_entropy(l, &[2, 7], &[1.0, 1.0])
    })
    .unwrap();
    errs.push(("LoRA", r.max_rel_error()));

    let el = t.elapsed();
    let pass = errs.iter().all(|(_, e)| *e < 1e-4) && el < Duration::from_secs(120);
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    assert!(verdict("finite-difference gradients", pass, format!("max rel err: {}; {:.2}s", detail.join(", "), secs(el))));
}

#[test]
fn routing_exclusivity() {
    let _g = serial();
    let t = Instant::now();
    let cfg = MoMEConfig { d_f: 8, heads: 2, l1: 2, l2: 2, d_ffn: 12 };
    let mut s = ParamStore::new();
    init_mome(&mut s, &cfg, &mut seeded(2, &[])).unwrap();
    for l in 0..cfg.layers() {
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            let name = format!("mome.layer{l}.mhsa.{w}");
            let shape = s.require(&name).unwrap().shape().to_vec();
            s.insert(name, Tensor::zeros(&shape));
        }
    }
    let layout = StackLayout::modality_major(&Modality::ALL, 2).unwrap();
    let x = Tensor::uniform(&[6, 8], 1.0, &mut seeded(3, &[]));
    let mut exclusive = true;
    let mut leaks = Vec::new();
    for (k, m) in Modality::ALL.iter().enumerate() {
        let mut tape = Tape::new(&s);
        let rows = tape.constant(x.clone());
        let h = mome_forward(&mut tape, &cfg, rows, &layout).unwrap();
        let mine = tape.gather_rows(h, &[2 * k, 2 * k + 1]).unwrap();
        let loss = tape.sum(mine).unwrap();
        let g = tape.backward(loss).unwrap();
        let own = speeder_core::mome::Expert::for_modality(*m).tag();
        for (name, grad) in &g {
            let Some(rest) = name.strip_prefix("mome.layer") else { continue };
            let layer: usize = rest.split('.').next().unwrap().parse().unwrap();
            if layer < cfg.l1 && name.contains(".expert.") && !name.contains(&format!(".expert.{own}.")) {
                if grad.data().iter().any(|v| *v != 0.0) {
                    exclusive = false;
                    leaks.push(name.clone());
                }
            }
        }
        exclusive &= g.keys().any(|n| n.contains(&format!("layer0.expert.{own}.")));
    }
    let mut multimodal_only = true;
    for layer in cfg.l1..cfg.layers() {
        let mut tape = Tape::inference(&s);
        let h = tape.constant(x.clone());
        mome_layer(&mut tape, &cfg, layer, h, &layout.tags, &layout.groups).unwrap();
        let touched: BTreeSet<String> = tape.touched_params().into_iter().map(String::from).collect();
        multimodal_only &= touched.iter().any(|n| n.contains("expert.multimodal"))
            && touched.iter().all(|n| !["textual", "visual", "sequential"].iter().any(|e| n.contains(&format!("expert.{e}"))));
    }
    let el = t.elapsed();
    assert!(verdict(
        "hard routing exclusivity",
        exclusive && multimodal_only && el < Duration::from_secs(10),
        format!("L1 exclusive={exclusive} {leaks:?}, L2 multimodal-only={multimodal_only}, {:.3}s", secs(el))
    ));
}

#[test]
fn metric_identity() {
    let _g = serial();
    // 1105 answers, 1002 well formed, 466 correct.
    let pools: Vec<CandidatePool> = (0..1105).map(|i| CandidatePool { candidates: vec![0, 1, 2, 3, 4], positive_index: i % 5 }).collect();
    let preds: Vec<Prediction> = (0..1105)
        .map(|i| {
            let index = if i < 1002 { Some(if i < 466 { i % 5 + 1 } else { (i + 1) % 5 + 1 }) } else { None };
            Prediction { index, proxy: None }
        })
        .collect();
    let r = score(&preds, &pools).unwrap();
    let round4 = |x: f64| (x * 1e4).round() / 1e4;
    let row = (round4(r.hr1), round4(r.valid_ratio), round4(r.vhr1));
    let mut identity = r.vhr1 == r.valid_ratio * r.hr1;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let total = rng.gen_range(1..5000);
        let valid = rng.gen_range(0..=total);
        let correct = rng.gen_range(0..=valid);
        let r = score_counts(total, valid, correct).unwrap();
        identity &= r.vhr1 == r.valid_ratio * r.hr1;
    }
    assert!(verdict(
        "VHR@1 = ValidRatio x HR@1",
        identity && row == (0.4651, 0.9068, 0.4217),
        format!("identity over 10001 reports={identity}; mocked row HR {:.4} VR {:.4} VHR {:.4}", row.0, row.1, row.2)
    ));
}

fn base_cache() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("speeder-base")
}

#[test]
fn gate_ramp() {
    let _g = serial();
    let cfg = speeder_core::corpus::CorpusConfig {
        seqs: 120,
        catalog: CatalogConfig { size: 80, ..Default::default() },
        ..Default::default()
    };
    let ds = generate_dataset(&cfg, 9).unwrap();
    let mut model = build_model(&ds, &Default::default(), None, 9).unwrap();
    let tc = TrainConfig { stage_epochs: [1, 0, 0], eval_limit: 4, ..Default::default() };
    Trainer::new(&ds, &tc, 9).run(&mut model, None).unwrap();
    let stack = build_stage_plan(2, Variant::Full, &model.cfg, 1).unwrap().stack();
    let zeroed = Stack { zeroed: vec![Modality::Vision], ..stack.clone() };
    let batch: Vec<_> = samples(&ds, Split::Train, 9, &[0]).unwrap().into_iter().take(16).collect();
    let loss = |st: &Stack| {
        let mut tape = Tape::new(&model.params);
        let l = model.batch_loss(&mut tape, &batch, st, LossWeights::default()).unwrap();
        tape.value(l).data()[0]
    };
    let (a, b) = (loss(&stack), loss(&zeroed));
    let fa = model.fused_table(&stack).unwrap();
    let fb = model.fused_table(&zeroed).unwrap();
    let same_table = fa.data().iter().zip(fb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    assert!(verdict(
        "zero gates: first stage-2 forward equals vision hard-zeroed",
        a.to_bits() == b.to_bits() && same_table,
        format!("loss {a:e} vs {b:e}, fused table bit-identical={same_table}")
    ));
}

struct LearnedRun {
    hr1: f64,
    valid_ratio: f64,
    ppt_valid_acc: f64,
    seconds: f64,
    frozen_violations: Vec<String>,
    frozen_checked: usize,
}

fn run_pipeline(rule: Rule, variant: Variant, seed: u64) -> (LearnedRun, SpeederModel) {
    let t = Instant::now();
    let mut cfg = RunConfig { seed, ..Default::default() };
    cfg.corpus.rule = rule;
    cfg.train.variant = variant;
    cfg.train.eval_limit = 100;
    cfg.train.stage_epochs = [5, 5, 30];
    variant.apply(&mut cfg.model);
    cfg.validate().unwrap();
    let ds = generate_dataset(&cfg.corpus, seed).unwrap();
    let base = model_base(&ds.catalog, &cfg.model, &cfg.pretrain, Some(&base_cache()), |_| {}).unwrap();
    let mut model = build_model(&ds, &cfg.model, Some(&base), seed).unwrap();
    let initial = model.params.clone();
    let out = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(&ds, &cfg.train, seed);
    tr.config_hash = cfg.hash().unwrap();
    tr.out_dir = Some(out.path().to_path_buf());
    tr.run(&mut model, None).unwrap();

    // Every name outside a stage's trainable set must be bit-identical
    // between the checkpoints bracketing that stage.
    let mut prev = initial;
    let mut violations = Vec::new();
    let mut checked = 0;
    for plan in cfg.train.plans(&cfg.model).unwrap() {
        let (_, ck) = load_checkpoint(out.path().join(format!("stage{}.ckpt", plan.stage_id))).unwrap();
        for (name, before) in prev.iter() {
            if plan.trainable.iter().any(|p| glob_match(p, name)) {
                continue;
            }
            checked += 1;
            let after = ck.require(name).unwrap();
            let same = before.shape() == after.shape() && before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                violations.push(format!("stage{}:{name}", plan.stage_id));
            }
        }
        prev = ck;
    }

    let valid = eval_samples(&ds, Split::Valid, seed).unwrap();
    let report = evaluate(&model, &valid, &Stack::of(&Modality::ALL)).unwrap();
    let run = LearnedRun {
        hr1: report.hr1,
        valid_ratio: report.valid_ratio,
        ppt_valid_acc: report.ppt.map_or(f64::NAN, |p| p.valid_acc),
        seconds: t.elapsed().as_secs_f64(),
        frozen_violations: violations,
        frozen_checked: checked,
    };
    (run, model)
}

fn latent_run() -> &'static LearnedRun {
    static RUN: OnceLock<LearnedRun> = OnceLock::new();
    RUN.get_or_init(|| run_pipeline(Rule::LatentMatch, Variant::Full, 1).0)
}

#[test]
fn mpo_freeze_exactness() {
    let _g = serial();
    let r = latent_run();
    assert!(verdict(
        "frozen parameters bit-identical across stages",
        r.frozen_violations.is_empty() && r.frozen_checked > 0,
        format!("{} frozen tensors checked, {} changed {:?}", r.frozen_checked, r.frozen_violations.len(), r.frozen_violations)
    ));
}

#[test]
fn learning_sanity_latent_match() {
    let _g = serial();
    let r = latent_run();
    assert!(verdict(
        "latent-match HR@1 >= 0.6 and ValidRatio >= 0.98",
        r.hr1 >= 0.6 && r.valid_ratio >= 0.98 && r.seconds <= 1800.0,
        format!("HR@1 {:.4}, ValidRatio {:.4}, chance 0.2, {:.0}s including base preparation", r.hr1, r.valid_ratio, r.seconds)
    ));
}

#[test]
fn proxy_task_trainability() {
    let _g = serial();
    let r = latent_run();
    assert!(verdict(
        "proxy ValidAcc >= 0.90",
        r.ppt_valid_acc >= 0.90,
        format!("ValidAcc {:.4}", r.ppt_valid_acc)
    ));
}

#[test]
fn spae_ablation_direction() {
    let _g = serial();
    let t = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=3 {
        let full = run_pipeline(Rule::PositionalColorMatch, Variant::Full, seed).0;
        let without = run_pipeline(Rule::PositionalColorMatch, Variant::WoSpae, seed).0;
        wins += usize::from(full.hr1 > without.hr1);
        rows.push(format!("seed {seed}: {:.4} vs {:.4}", full.hr1, without.hr1));
    }
    let el = t.elapsed();
    assert!(verdict(
        "full beats w/o-SPAE on positional-color-match",
        wins >= 2 && el <= Duration::from_secs(90 * 60),
        format!("{wins}/3 seeds ({}), {:.0}s", rows.join("; "), secs(el))
    ));
}
