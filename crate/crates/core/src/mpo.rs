//! Modality-aware progressive optimization: per-stage trainable masks and
//! modality mixtures, the staged training loop, stage-boundary checkpoints
//! and the freeze audit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, Dataset, Split};
use crate::encoders::{EncoderSuite, Modality};
use crate::error::{invalid, Error, Result};
use crate::eval::{score_counts, score_ppt, MetricsReport};
use crate::model::{LossWeights, ModelConfig, Sample, SpeederModel, Stack};
use crate::numerics::{load_checkpoint, save_checkpoint, Adam, CheckpointMeta, LrSchedule, ParamStore, Tape};
use crate::promptlm::{pretrained_base, GateKind, PretrainConfig, PretrainRecord, Vocab};
use crate::rng::seeded;
use crate::spae::{sample_ppt, PPL_NAME};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    WoPpt,
    WoPpl,
    WoSpae,
    WoMpoS1,
    WoMpoS1s2,
    WoText,
    WoVision,
    WoSeq,
    WoTanh,
    ReluGate,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::WoPpt,
        Variant::WoPpl,
        Variant::WoSpae,
        Variant::WoMpoS1,
        Variant::WoMpoS1s2,
        Variant::WoText,
        Variant::WoVision,
        Variant::WoSeq,
        Variant::WoTanh,
        Variant::ReluGate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoPpt => "wo-ppt",
            Variant::WoPpl => "wo-ppl",
            Variant::WoSpae => "wo-spae",
            Variant::WoMpoS1 => "wo-mpo-s1",
            Variant::WoMpoS1s2 => "wo-mpo-s1s2",
            Variant::WoText => "wo-text",
            Variant::WoVision => "wo-vision",
            Variant::WoSeq => "wo-seq",
            Variant::WoTanh => "wo-tanh",
            Variant::ReluGate => "relu-gate",
        }
    }

    pub fn removed_modality(self) -> Option<Modality> {
        match self {
            Variant::WoText => Some(Modality::Text),
            Variant::WoVision => Some(Modality::Vision),
            Variant::WoSeq => Some(Modality::Sequential),
            _ => None,
        }
    }

    pub fn stages(self) -> &'static [u8] {
        match self {
            Variant::WoMpoS1 => &[2, 3],
            Variant::WoMpoS1s2 => &[3],
            _ => &[1, 2, 3],
        }
    }

    /// Model switches implied by the variant.
    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Variant::WoPpt => cfg.ppt = false,
            Variant::WoPpl => cfg.ppl = false,
            Variant::WoSpae => {
                cfg.ppt = false;
                cfg.ppl = false;
            }
            Variant::WoTanh => cfg.gate = GateKind::None,
            Variant::ReluGate => cfg.gate = GateKind::Relu,
            _ => {}
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_id: u8,
    /// Glob patterns (`*` = any substring) of trainable parameter names.
    pub trainable: Vec<String>,
    pub modalities: Vec<Modality>,
    pub gates_active: Vec<Modality>,
    pub epochs: usize,
}

impl StagePlan {
    pub fn stack(&self) -> Stack {
        Stack::of(&self.modalities)
    }
}

fn expert_tag(m: Modality) -> &'static str {
    crate::mome::Expert::for_modality(m).tag()
}

/// Trainable masks and modality mixture of one stage.
pub fn build_stage_plan(stage_id: u8, variant: Variant, model: &ModelConfig, epochs: usize) -> Result<StagePlan> {
    let base: &[Modality] = match stage_id {
        1 => &[Modality::Text],
        2 => &[Modality::Text, Modality::Vision],
        3 => &Modality::ALL,
        other => return Err(Error::Config(format!("no stage {other}"))),
    };
    let removed = variant.removed_modality();
    let modalities: Vec<Modality> = base.iter().copied().filter(|m| Some(*m) != removed).collect();
    let gated = model.gate != GateKind::None;
    let gates_active: Vec<Modality> = if gated {
        modalities.iter().copied().filter(|m| *m != Modality::Text).collect()
    } else {
        Vec::new()
    };
    let mut t: Vec<String> = vec!["lm.*.lora_a".into(), "lm.*.lora_b".into(), "adapter.fusion.*".into()];
    if model.ppl {
        t.push(PPL_NAME.into());
    }
    for m in &modalities {
        t.push(format!("adapter.{}.*", m.tag()));
    }
    for m in &gates_active {
        t.push(format!("gate.{}.*", m.tag()));
    }
    match stage_id {
        1 => {
            if modalities.contains(&Modality::Text) {
                t.push(format!("mome.*.expert.{}.*", expert_tag(Modality::Text)));
            }
        }
        _ => {
            t.push("mome.*.mhsa.*".into());
            t.push("mome.*.ln_*".into());
            t.push("mome.*.expert.multimodal.*".into());
            let experts: &[Modality] = if stage_id == 2 {
                &[Modality::Text, Modality::Vision]
            } else {
                &Modality::ALL
            };
            for m in experts.iter().filter(|m| Some(**m) != removed) {
                t.push(format!("mome.*.expert.{}.*", expert_tag(*m)));
            }
        }
    }
    Ok(StagePlan {
        stage_id,
        trainable: t,
        modalities,
        gates_active,
        epochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub stage_epochs: [usize; 3],
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weights: LossWeights,
    /// Validation examples scored after every epoch (`0` = all).
    pub eval_limit: usize,
    /// Extra trainable patterns added to every stage.
    pub extra_trainable: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            stage_epochs: [3, 3, 6],
            batch_size: 16,
            lr: 2e-3,
            warmup_frac: 0.05,
            weights: LossWeights::default(),
            eval_limit: 0,
            extra_trainable: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn plans(&self, model: &ModelConfig) -> Result<Vec<StagePlan>> {
        self.variant
            .stages()
            .iter()
            .map(|s| {
                let mut p = build_stage_plan(*s, self.variant, model, self.stage_epochs[*s as usize - 1])?;
                p.trainable.extend(self.extra_trainable.iter().cloned());
                Ok(p)
            })
            .filter(|p| p.as_ref().map_or(true, |p| !p.modalities.is_empty() && p.epochs > 0))
            .collect()
    }
}

const STREAM_ORDER: u64 = 41;
const STREAM_PPT: u64 = 42;
const STREAM_EVAL_PPT: u64 = 43;

/// Examples of `split` with their fixed pools; training proxy instances
/// are drawn per `(stage, epoch)`, evaluation ones once per split.
pub fn samples(dataset: &Dataset, split: Split, seed: u64, ppt_path: &[u64]) -> Result<Vec<Sample>> {
    dataset
        .indices(split)
        .into_iter()
        .map(|i| {
            let ex = &dataset.examples[i];
            let mut path = ppt_path.to_vec();
            path.push(i as u64);
            let mut rng = seeded(seed, &path);
            Ok(Sample {
                history: ex.sequence.items.clone(),
                pool: dataset.pools[i].clone(),
                ppt: Some(sample_ppt(&ex.sequence.items, &mut rng)?),
            })
        })
        .collect()
}

pub fn eval_samples(dataset: &Dataset, split: Split, seed: u64) -> Result<Vec<Sample>> {
    samples(dataset, split, seed, &[STREAM_EVAL_PPT, split.id()])
}

/// Pre-trains the sequential encoder on the training split and wraps the
/// frozen encoder outputs in a freshly initialized model. A given `base`
/// replaces the decoder's random weights.
pub fn build_model(dataset: &Dataset, cfg: &ModelConfig, base: Option<&ParamStore>, seed: u64) -> Result<SpeederModel> {
    let train: Vec<Vec<u32>> = dataset
        .indices(Split::Train)
        .into_iter()
        .map(|i| {
            let ex = &dataset.examples[i];
            let mut s = ex.sequence.items.clone();
            s.push(ex.next_item);
            s
        })
        .collect();
    let suite = EncoderSuite::build(&dataset.catalog, &cfg.encoders, &train, seed)?;
    let features = suite.features(&dataset.catalog)?;
    let mut model = SpeederModel::init(cfg.clone(), &dataset.catalog, features, &suite.seq.store, seed)?;
    if let Some(b) = base {
        model.install_base(b)?;
    }
    Ok(model)
}

/// The decoder base for `cfg` over `catalog`, pretrained (or loaded from
/// `cache_dir`) per `pretrain`.
pub fn model_base(catalog: &Catalog, cfg: &ModelConfig, pretrain: &PretrainConfig, cache_dir: Option<&Path>, on_record: impl FnMut(&PretrainRecord)) -> Result<ParamStore> {
    let vocab = Vocab::new(cfg.n_max.max(cfg.pool_size), catalog.title_vocab);
    pretrained_base(&cfg.lm, &vocab, pretrain, cache_dir, on_record)
}

/// Rebuilds a model from stored weights (features are recomputed from the
/// stored sequential encoder).
pub fn restore_model(dataset: &Dataset, cfg: &ModelConfig, params: ParamStore, seed: u64) -> Result<SpeederModel> {
    let seq: ParamStore = {
        let mut s = ParamStore::new();
        for (n, t) in params.iter().filter(|(n, _)| n.starts_with(crate::encoders::SEQ_PREFIX)) {
            s.insert(n, t.clone());
        }
        s.freeze_all();
        s
    };
    let suite = EncoderSuite::from_parts(&dataset.catalog, &cfg.encoders, seq, seed)?;
    let features = suite.features(&dataset.catalog)?;
    let mut model = SpeederModel::init(cfg.clone(), &dataset.catalog, features, &ParamStore::new(), seed)?;
    model.params = params;
    Ok(model)
}

/// Greedy answers and metrics for `samples` under `stack`.
pub fn evaluate(model: &SpeederModel, samples: &[Sample], stack: &Stack) -> Result<MetricsReport> {
    let fused = model.fused_table(stack)?;
    let mut valid = 0;
    let mut correct = 0;
    let mut proxy = Vec::with_capacity(samples.len());
    for s in samples {
        let a = model.answer(&fused, s)?;
        if let Some(k) = a.index {
            valid += 1;
            if k == s.pool.positive_index + 1 {
                correct += 1;
            }
        }
        proxy.push(a.proxy);
    }
    let mut report = score_counts(samples.len(), valid, correct)?;
    if model.cfg.ppt && model.cfg.eval_proxy {
        let inst: Vec<_> = samples.iter().map(|s| s.ppt.clone().ok_or_else(|| invalid("missing proxy instance"))).collect::<Result<_>>()?;
        report.ppt = Some(score_ppt(&proxy, &inst)?);
    }
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    /// Mean loss over the first and last quarter of the epoch's batches.
    pub loss_first_quarter: f64,
    pub loss_last_quarter: f64,
    pub hr1: f64,
    pub valid_ratio: f64,
    pub ppt_acc: Option<f64>,
    pub ppt_valid_acc: Option<f64>,
    pub seconds: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: u8,
    pub changed: Vec<String>,
    /// Changed names outside the stage's trainable set; always empty on success.
    pub frozen_changed: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub audits: Vec<StageAudit>,
    /// Weights at the end of each executed stage.
    pub stage_params: Vec<(u8, ParamStore)>,
}

/// Where a run restarts.
#[derive(Clone, Debug)]
pub struct ResumePoint {
    pub stage: u8,
    /// Epochs of `stage` already completed.
    pub epochs_done: usize,
    pub optimizer: Option<(u64, ParamStore)>,
}

pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub cfg: &'a TrainConfig,
    pub seed: u64,
    pub config_hash: String,
    pub out_dir: Option<PathBuf>,
    /// Copied into the metadata of every checkpoint written.
    pub meta_extra: BTreeMap<String, String>,
    /// Called with every log record as it is produced.
    pub on_record: Option<Box<dyn FnMut(&LogRecord) + 'a>>,
}

const OPT_PREFIX: &str = "optim/";

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &'a TrainConfig, seed: u64) -> Self {
        Self {
            dataset,
            cfg,
            seed,
            config_hash: String::new(),
            out_dir: None,
            meta_extra: BTreeMap::new(),
            on_record: None,
        }
    }

    fn save(&self, file: &str, model: &SpeederModel, stage: u8, step: u64, mut extra: BTreeMap<String, String>, opt: Option<&Adam>) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        for (k, v) in &self.meta_extra {
            extra.entry(k.clone()).or_insert_with(|| v.clone());
        }
        std::fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            config_hash: self.config_hash.clone(),
            stage,
            step,
            extra,
        };
        let mut store = model.params.clone();
        if let Some(opt) = opt {
            for (n, t) in opt.export_moments().iter() {
                store.insert(format!("{OPT_PREFIX}{n}"), t.clone());
            }
        }
        save_checkpoint(dir.join(file), &meta, &store)
    }

    /// Runs every planned stage (or the remainder after `resume`).
    pub fn run(&mut self, model: &mut SpeederModel, resume: Option<ResumePoint>) -> Result<TrainOutcome> {
        if model.cfg.pool_size != self.dataset.manifest.pool_size {
            return Err(Error::Config("model and dataset disagree on pool size".into()));
        }
        let plans = self.cfg.plans(&model.cfg)?;
        let valid_all = eval_samples(self.dataset, Split::Valid, self.seed)?;
        let valid: &[Sample] = if self.cfg.eval_limit > 0 {
            &valid_all[..self.cfg.eval_limit.min(valid_all.len())]
        } else {
            &valid_all
        };
        let train_idx = self.dataset.indices(Split::Train);
        if train_idx.is_empty() {
            return Err(invalid("no training examples"));
        }
        let mut outcome = TrainOutcome {
            log: Vec::new(),
            audits: Vec::new(),
            stage_params: Vec::new(),
        };
        let mut resume = resume;
        for plan in &plans {
            let mut start_epoch = 0;
            let mut restored_opt = None;
            if let Some(r) = &resume {
                if plan.stage_id < r.stage || (plan.stage_id == r.stage && r.epochs_done >= plan.epochs) {
                    continue;
                }
                if plan.stage_id == r.stage {
                    start_epoch = r.epochs_done;
                    restored_opt = r.optimizer.clone();
                }
                resume = None;
            }
            model.params.set_trainable(&plan.trainable);
            let before = model.params.clone();
            let stack = plan.stack();
            let batches_per_epoch = train_idx.len().div_ceil(self.cfg.batch_size);
            let schedule = LrSchedule::new(self.cfg.lr, self.cfg.warmup_frac, (plan.epochs * batches_per_epoch) as u64);
            let mut opt = match restored_opt {
                Some((step, moments)) => Adam::restore(schedule, step, &moments)?,
                None => Adam::new(schedule),
            };
            for epoch in start_epoch..plan.epochs {
                let t0 = Instant::now();
                let mut order = train_idx.clone();
                order.shuffle(&mut seeded(self.seed, &[STREAM_ORDER, plan.stage_id as u64, epoch as u64]));
                let all = samples(self.dataset, Split::Train, self.seed, &[STREAM_PPT, plan.stage_id as u64, epoch as u64])?;
                let pos: BTreeMap<usize, usize> = train_idx.iter().enumerate().map(|(k, i)| (*i, k)).collect();
                let mut losses = Vec::with_capacity(batches_per_epoch);
                for chunk in order.chunks(self.cfg.batch_size) {
                    let batch: Vec<Sample> = chunk.iter().map(|i| all[pos[i]].clone()).collect();
                    let (loss, grads) = {
                        let mut tape = Tape::new(&model.params);
                        let l = model.batch_loss(&mut tape, &batch, &stack, self.cfg.weights)?;
                        (tape.value(l).data()[0], tape.backward(l)?)
                    };
                    if !loss.is_finite() {
                        return Err(Error::Diverged { stage: plan.stage_id, epoch });
                    }
                    opt.step(&mut model.params, &grads).map_err(|e| match e {
                        Error::NonFiniteGradient(_) => Error::Diverged { stage: plan.stage_id, epoch },
                        other => other,
                    })?;
                    losses.push(loss);
                }
                let report = evaluate(model, valid, &stack)?;
                let q = (losses.len() / 4).max(1);
                let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
                let rec = LogRecord {
                    stage: plan.stage_id,
                    epoch,
                    steps: opt.step_count(),
                    loss: mean(&losses),
                    loss_first_quarter: mean(&losses[..q]),
                    loss_last_quarter: mean(&losses[losses.len() - q..]),
                    hr1: report.hr1,
                    valid_ratio: report.valid_ratio,
                    ppt_acc: report.ppt.map(|p| p.acc),
                    ppt_valid_acc: report.ppt.map(|p| p.valid_acc),
                    seconds: t0.elapsed().as_secs_f64(),
                    config_hash: self.config_hash.clone(),
                };
                if let Some(cb) = self.on_record.as_mut() {
                    cb(&rec);
                }
                if let Some(dir) = &self.out_dir {
                    use std::io::Write;
                    std::fs::create_dir_all(dir)?;
                    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
                    writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                }
                outcome.log.push(rec);
                let extra = BTreeMap::from([
                    ("epochs_done".to_string(), (epoch + 1).to_string()),
                    ("variant".to_string(), self.cfg.variant.to_string()),
                    ("modalities".to_string(), modality_list(&plan.modalities)),
                ]);
                self.save("last.ckpt", model, plan.stage_id, opt.step_count(), extra, Some(&opt))?;
            }
            let changed = before.diff(&model.params);
            let trainable = model.params.trainable_names();
            let frozen_changed: Vec<String> = changed.iter().filter(|n| !trainable.contains(n)).cloned().collect();
            let audit = StageAudit {
                stage: plan.stage_id,
                changed,
                frozen_changed,
            };
            if !audit.frozen_changed.is_empty() {
                return Err(invalid(format!("stage {} modified frozen {:?}", plan.stage_id, audit.frozen_changed)));
            }
            outcome.audits.push(audit);
            let extra = BTreeMap::from([
                ("epochs_done".to_string(), plan.epochs.to_string()),
                ("variant".to_string(), self.cfg.variant.to_string()),
                ("modalities".to_string(), modality_list(&plan.modalities)),
            ]);
            self.save(&format!("stage{}.ckpt", plan.stage_id), model, plan.stage_id, opt.step_count(), extra, None)?;
            outcome.stage_params.push((plan.stage_id, model.params.clone()));
        }
        Ok(outcome)
    }
}

pub fn modality_list(ms: &[Modality]) -> String {
    ms.iter().map(|m| m.tag()).collect::<Vec<_>>().join(",")
}

pub fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    s.split(',').filter(|t| !t.is_empty()).map(str::parse).collect()
}

/// Loads a checkpoint written by [`Trainer`], splitting model weights from
/// optimizer state; returns the resume point it encodes.
pub fn load_training_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointMeta, ParamStore, ResumePoint)> {
    let (meta, store) = load_checkpoint(path)?;
    let mut params = ParamStore::new();
    let mut moments = ParamStore::new();
    for (n, t) in store.iter() {
        match n.strip_prefix(OPT_PREFIX) {
            Some(rest) => moments.insert(rest, t.clone()),
            None => {
                params.insert(n, t.clone());
                if store.is_frozen(n) {
                    params.freeze(n);
                }
            }
        }
    }
    let epochs_done = meta
        .extra
        .get("epochs_done")
        .map(|e| e.parse::<usize>())
        .transpose()
        .map_err(|_| Error::Format("bad epochs_done".into()))?
        .unwrap_or(0);
    let optimizer = (!moments.is_empty()).then(|| (meta.step, moments));
    let point = ResumePoint {
        stage: meta.stage,
        epochs_done,
        optimizer,
    };
    Ok((meta, params, point))
}
