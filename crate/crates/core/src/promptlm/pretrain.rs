//! Generic pretraining of the decoder base on random-vector prompts.
//!
//! The base never sees catalog items: every prompt is filled with fresh
//! random unit vectors. Histories follow a drifting "taste" direction, the
//! positive candidate sits near the next taste step and negatives are
//! uniform on the sphere. The proxy block asks the usual gap question
//! about three history positions. After this phase the base is frozen and
//! only adapters, LoRA and prompt parameters move.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lm::{decode, init_lm, is_lora, logits_at, LmConfig, LM_PREFIX};
use super::prompt::{assemble_prompt, HybridPrompt, PromptMode, Slot};
use super::vocab::Vocab;
use super::{embed_prompt, greedy};
use crate::corpus::CandidatePool;
use crate::error::{invalid, Error, Result};
use crate::config::canonical_hash;
use crate::numerics::{load_checkpoint, save_checkpoint, Adam, CheckpointMeta, LrSchedule, ParamStore, Tape, Tensor, Var};
use crate::rng::{normal, seeded};
use crate::spae::sample_ppt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// `0` leaves the base at its random initialization.
    pub steps: usize,
    /// The base is shared by every run with the same settings, so it has
    /// its own seed rather than the run seed.
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub m: usize,
    /// Per-step random-walk scale of the taste direction.
    pub drift: f64,
    /// Scatter of items around the current taste.
    pub noise: f64,
    /// Fraction of prompts carrying the proxy block.
    pub proxy_frac: f64,
    /// Also predict every template and index token of the prompt itself.
    pub dense: bool,
    /// Fraction of steps over which noise and drift ramp up from zero.
    pub ramp_frac: f64,
    /// Fraction of prompts whose history slots carry a learned position
    /// code, the way position prompts do during fine-tuning.
    pub coded_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            seed: 0,
            batch: 16,
            lr: 2e-3,
            warmup_frac: 0.05,
            n_min: 9,
            n_max: 20,
            m: 5,
            drift: 0.35,
            noise: 0.5,
            proxy_frac: 0.75,
            dense: false,
            ramp_frac: 0.5,
            coded_frac: 0.5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.steps == 0 {
            return Ok(());
        }
        if self.batch == 0 || self.m == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("pretraining needs batch, m and lr positive".into()));
        }
        if self.n_min < 3 || self.n_min > self.n_max || self.n_max.max(self.m) > vocab.max_index {
            return Err(Error::Config(format!(
                "pretraining histories [{}, {}] must have ≥ 3 items and fit {} index tokens",
                self.n_min, self.n_max, vocab.max_index
            )));
        }
        Ok(())
    }
}

/// One random-vector prompt: item `i` of the prompt reads row `i` of `vectors`.
#[derive(Clone, Debug)]
pub struct SyntheticPrompt {
    pub prompt: HybridPrompt,
    pub vectors: Tensor,
    /// History slots add rows of the pretraining position table.
    pub coded: bool,
}

/// Position table used only while pretraining; dropped afterwards.
pub const PRETRAIN_POS: &str = "pretrain.pos";

fn unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn perturb<R: Rng + ?Sized>(rng: &mut R, base: &[f64], scale: f64) -> Vec<f64> {
    let g = unit(rng, base.len());
    let v: Vec<f64> = base.iter().zip(&g).map(|(b, e)| b + scale * e).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// A random prompt with noise and drift scaled by `level ∈ [0, 1]`.
pub fn synthetic_prompt<R: Rng + ?Sized>(vocab: &Vocab, cfg: &PretrainConfig, d: usize, level: f64, rng: &mut R) -> Result<SyntheticPrompt> {
    let (noise, drift) = (cfg.noise * level, cfg.drift * level);
    let n = rng.gen_range(cfg.n_min..=cfg.n_max);
    let mut taste = unit(rng, d);
    let mut rows = Vec::with_capacity((n + cfg.m) * d);
    for _ in 0..n {
        rows.extend(perturb(rng, &taste, noise));
        taste = perturb(rng, &taste, drift);
    }
    let positive_index = rng.gen_range(0..cfg.m);
    for j in 0..cfg.m {
        if j == positive_index {
            rows.extend(perturb(rng, &taste, noise));
        } else {
            rows.extend(unit(rng, d));
        }
    }
    let history: Vec<u32> = (0..n as u32).collect();
    let pool = CandidatePool {
        candidates: (n as u32..(n + cfg.m) as u32).collect(),
        positive_index,
    };
    let ppt = if rng.gen_bool(cfg.proxy_frac.clamp(0.0, 1.0)) {
        Some(sample_ppt(&history, rng)?)
    } else {
        None
    };
    let prompt = assemble_prompt(vocab, None, &history, &pool, ppt.as_ref(), PromptMode::Speeder, cfg.m, 2)?;
    Ok(SyntheticPrompt {
        prompt,
        vectors: Tensor::new(vec![n + cfg.m, d], rows)?,
        coded: rng.gen_bool(cfg.coded_frac.clamp(0.0, 1.0)),
    })
}

fn inputs(tape: &mut Tape, s: &SyntheticPrompt, fed: &[u32]) -> Result<Var> {
    let table = tape.constant(s.vectors.clone());
    let hist: Vec<usize> = (0..s.prompt.n).collect();
    let mut composed = tape.gather_rows(table, &hist)?;
    if s.coded {
        let pos = tape.param(PRETRAIN_POS)?;
        let p = tape.gather_rows(pos, &hist)?;
        composed = tape.add(composed, p)?;
    }
    let rows = s.vectors.rows();
    let group_of = |it: u32| {
        if (it as usize) < rows {
            Ok(it as usize)
        } else {
            Err(Error::UnknownItem(it))
        }
    };
    embed_prompt(tape, &s.prompt, fed, Some(table), Some(composed), &group_of)
}

/// Mean teacher-forced negative log-likelihood over `batch`; with `dense`
/// the prompt's own token slots are targets too.
pub fn synthetic_loss(tape: &mut Tape, cfg: &LmConfig, batch: &[SyntheticPrompt], dense: bool) -> Result<Var> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut total: Option<Var> = None;
    for s in batch {
        let p = &s.prompt;
        let x = inputs(tape, s, &p.targets[..p.targets.len() - 1])?;
        let h = decode(tape, cfg, x)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        if dense {
            for (i, w) in p.slots.windows(2).enumerate() {
                if let Slot::Token(t) = w[1] {
                    rows.push(i);
                    targets.push(t as usize);
                }
            }
        }
        rows.extend((0..p.targets.len()).map(|k| p.len() - 1 + k));
        targets.extend(p.targets.iter().map(|t| *t as usize));
        let logits = logits_at(tape, h, &rows)?;
        let l = tape.cross_entropy(logits, &targets, &vec![1.0; targets.len()])?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Greedy accuracy of the base on synthetic prompts.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ProbeScore {
    pub index: f64,
    /// Proxy accuracy over prompts with and without position codes.
    pub proxy_coded: Option<f64>,
    pub proxy_plain: Option<f64>,
}

pub fn synthetic_accuracy(params: &ParamStore, cfg: &LmConfig, set: &[SyntheticPrompt]) -> Result<ProbeScore> {
    let mut hit = 0usize;
    let mut proxy = [(0usize, 0usize); 2];
    for s in set {
        let p = &s.prompt;
        let mut fed = Vec::new();
        for step in 0..p.targets.len() {
            let mut tape = Tape::inference(params);
            let x = inputs(&mut tape, s, &fed)?;
            let h = decode(&mut tape, cfg, x)?;
            let logits = logits_at(&mut tape, h, &[p.len() - 1 + step])?;
            let row = tape.value(logits).data().to_vec();
            let tok = greedy(&row).unwrap_or(0);
            if step + 1 == p.targets.len() {
                hit += usize::from(tok == p.targets[step]);
            } else {
                let slot = &mut proxy[usize::from(s.coded)];
                slot.0 += usize::from(tok == p.targets[step]);
                slot.1 += 1;
                fed.push(tok);
            }
        }
    }
    let rate = |(h, t): (usize, usize)| (t > 0).then(|| h as f64 / t as f64);
    Ok(ProbeScore {
        index: hit as f64 / set.len().max(1) as f64,
        proxy_coded: rate(proxy[1]),
        proxy_plain: rate(proxy[0]),
    })
}

/// Progress line emitted every `report_every` steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    pub probe: ProbeScore,
}

const STREAM_PRETRAIN: u64 = 51;
const STREAM_PROBE: u64 = 52;

/// Trains every non-LoRA `lm.*` weight in place; LoRA factors and all other
/// parameters are untouched. Returns the progress records.
pub fn pretrain_base(
    params: &mut ParamStore,
    lm: &LmConfig,
    vocab: &Vocab,
    cfg: &PretrainConfig,
    seed: u64,
    report_every: usize,
    mut on_record: impl FnMut(&PretrainRecord),
) -> Result<Vec<PretrainRecord>> {
    cfg.validate(vocab)?;
    let frozen_before: Vec<String> = params.frozen().map(String::from).collect();
    let base: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(LM_PREFIX) && !is_lora(n))
        .map(String::from)
        .collect();
    if base.is_empty() {
        return Err(invalid("no decoder weights to pretrain"));
    }
    params.insert(PRETRAIN_POS, Tensor::zeros(&[cfg.n_max, lm.d]));
    let mut trained = base.clone();
    trained.push(PRETRAIN_POS.to_string());
    params.set_trainable(&trained);
    let mut probe_rng = seeded(seed, &[STREAM_PROBE]);
    let probe = (0..200)
        .map(|_| synthetic_prompt(vocab, cfg, lm.d, 1.0, &mut probe_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(LrSchedule::new(cfg.lr, cfg.warmup_frac, cfg.steps as u64));
    let mut rng = seeded(seed, &[STREAM_PRETRAIN]);
    let mut out = Vec::new();
    let mut window = Vec::new();
    for step in 1..=cfg.steps {
        let level = if cfg.ramp_frac > 0.0 {
            (step as f64 / (cfg.ramp_frac * cfg.steps as f64)).min(1.0)
        } else {
            1.0
        };
        let batch = (0..cfg.batch)
            .map(|_| synthetic_prompt(vocab, cfg, lm.d, level, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = {
            let mut tape = Tape::new(params);
            let l = synthetic_loss(&mut tape, lm, &batch, cfg.dense)?;
            (tape.value(l).data()[0], tape.backward(l)?)
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { stage: 0, epoch: step });
        }
        opt.step(params, &grads)?;
        window.push(loss);
        if step % report_every.max(1) == 0 || step == cfg.steps {
            let rec = PretrainRecord {
                step,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                probe: synthetic_accuracy(params, lm, &probe)?,
            };
            window.clear();
            on_record(&rec);
            out.push(rec);
        }
    }
    params.remove(PRETRAIN_POS);
    params.freeze_all();
    let all: Vec<String> = params.names().map(String::from).collect();
    let keep: Vec<String> = all.into_iter().filter(|n| !frozen_before.contains(n)).collect();
    params.set_trainable(&keep);
    Ok(out)
}

const STREAM_BASE_INIT: u64 = 53;

/// Frozen base weights (every non-LoRA `lm.*` tensor) for `lm` over a
/// vocabulary of `vocab_len` tokens. With `cache_dir`, a finished base is
/// stored there under its settings hash and reused by later calls.
pub fn pretrained_base(
    lm: &LmConfig,
    vocab: &Vocab,
    cfg: &PretrainConfig,
    cache_dir: Option<&Path>,
    on_record: impl FnMut(&PretrainRecord),
) -> Result<ParamStore> {
    cfg.validate(vocab)?;
    let hash = canonical_hash(&(lm, vocab.len(), vocab.max_index, cfg))?;
    let path = cache_dir.map(|d| d.join(format!("base-{}.ckpt", &hash[..16])));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let (meta, store) = load_checkpoint(p)?;
        if meta.config_hash == hash {
            return Ok(store);
        }
        return Err(Error::HashMismatch { expected: hash, found: meta.config_hash });
    }
    let mut params = ParamStore::new();
    init_lm(&mut params, lm, vocab.len(), &mut seeded(cfg.seed, &[STREAM_BASE_INIT]))?;
    if cfg.steps > 0 {
        pretrain_base(&mut params, lm, vocab, cfg, cfg.seed, (cfg.steps / 10).max(1), on_record)?;
    }
    let lora: Vec<String> = params.names().filter(|n| is_lora(n)).map(String::from).collect();
    for n in &lora {
        params.remove(n);
    }
    params.freeze_all();
    if let Some(p) = path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        // Write then rename so concurrent runs never read a partial file.
        let tmp = p.with_extension(format!("tmp{}", std::process::id()));
        let meta = CheckpointMeta { config_hash: hash, stage: 0, step: cfg.steps as u64, extra: Default::default() };
        save_checkpoint(&tmp, &meta, &params)?;
        std::fs::rename(&tmp, &p)?;
    }
    Ok(params)
}
