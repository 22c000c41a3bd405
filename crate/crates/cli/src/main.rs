use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use speeder_core::config::RunConfig;
use speeder_core::corpus::{generate_dataset, ingest_amazon, Dataset, IngestConfig, Rule, Split};
use speeder_core::costmodel::{cost_curve, empirical_counters, improvement_limits, log_grid, CostParams, EmpiricalConfig};
use speeder_core::eval::report_csv;
use speeder_core::model::{SpeederModel, Stack};
use speeder_core::mpo::{
    build_model, eval_samples, evaluate, load_training_checkpoint, model_base, parse_modalities, restore_model, LogRecord,
    ResumePoint, Trainer, Variant,
};
use speeder_core::numerics::{load_checkpoint, CheckpointMeta};
use speeder_core::Error;

#[derive(Parser)]
#[command(name = "speeder", version, about = "Multimodal sequential recommendation at desk scale")]
struct Cli {
    /// Global seed; overrides the config file.
    #[arg(long, env = "SPEEDER_SEED", global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rule: Option<Rule>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        seqs: Option<usize>,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert an interaction log (JSON lines) into a dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        pool_size: usize,
        #[arg(long)]
        min_item_inter: Option<usize>,
        #[arg(long)]
        min_seq_len: Option<usize>,
        #[arg(long)]
        max_history: Option<usize>,
    },
    /// Run the staged training schedule.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated stage ids to run, e.g. `1,2,3`.
        #[arg(long)]
        stages: Option<String>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Epochs per stage, e.g. `3,3,6`.
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_limit: Option<usize>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
        /// Where pretrained decoder bases are cached (default: the output dir).
        #[arg(long, env = "SPEEDER_CACHE")]
        cache: Option<PathBuf>,
        /// Continue from a `last.ckpt` or stage checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split (CSV report).
    Eval(EvalArgs),
    /// Proxy-task accuracy of a checkpoint on a split (CSV).
    PptEval(EvalArgs),
    /// Cost-model curves or measured prompt costs.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchMode::ClosedForm)]
        mode: BenchMode,
        /// `lo:hi` range of history lengths (closed form).
        #[arg(long, default_value = "1:100000")]
        n_grid: String,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        /// Comma-separated history lengths (empirical).
        #[arg(long, default_value = "10,20,40,80")]
        ns: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer one example of a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Position within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Show a checkpoint's metadata and tensors, or the names changed
    /// relative to another checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        diff: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Must hash to the checkpoint's config when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drop the proxy block from evaluation prompts.
    #[arg(long)]
    no_proxy: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    ClosedForm,
    Empirical,
}

const RUN_CONFIG_KEY: &str = "run_config";
const DATASET_HASH_KEY: &str = "dataset_hash";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::GenData { config, rule, items, seqs, pool_size, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(r) = rule {
                cfg.corpus.rule = r;
            }
            if let Some(n) = items {
                cfg.corpus.catalog.size = n;
            }
            if let Some(n) = seqs {
                cfg.corpus.seqs = n;
            }
            if let Some(m) = pool_size {
                cfg.corpus.pool_size = m;
            }
            let seed = seed.unwrap_or(cfg.seed);
            let ds = generate_dataset(&cfg.corpus, seed)?;
            ds.save(&out)?;
            let m = &ds.manifest;
            eprintln!("wrote {} items, {} sequences ({}/{}/{}) to {}", m.items, m.seqs, m.train, m.valid, m.test, out.display());
        }
        Cmd::Ingest { input, out, pool_size, min_item_inter, min_seq_len, max_history } => {
            let mut cfg = IngestConfig::default();
            if let Some(v) = min_item_inter {
                cfg.min_item_inter = v;
            }
            if let Some(v) = min_seq_len {
                cfg.min_seq_len = v;
            }
            cfg.max_history = max_history.or(cfg.max_history);
            let ing = ingest_amazon(&input, &cfg)?;
            let generator = serde_json::json!({ "ingest": cfg, "source": input.file_name().map(|f| f.to_string_lossy().into_owned()) });
            let ds = Dataset::assemble(ing.catalog, ing.examples, None, pool_size, seed.unwrap_or(0), generator)?;
            ds.save(&out)?;
            fs::write(out.join("item_keys.txt"), ing.item_keys.join("\n") + "\n")?;
            let m = &ds.manifest;
            eprintln!("ingested {} items, {} sequences to {}", m.items, m.seqs, out.display());
        }
        Cmd::Train { config, data, out, stages, variant, epochs, lr, batch_size, eval_limit, pretrain_steps, cache, resume } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            if let Some(e) = epochs {
                cfg.train.stage_epochs = parse_triple(&e)?;
            }
            if let Some(s) = stages {
                let keep = parse_list(&s)?;
                ensure!(keep.iter().all(|s| (1..=3).contains(s)), "stages must be within 1..=3");
                for (i, e) in cfg.train.stage_epochs.iter_mut().enumerate() {
                    if !keep.contains(&(i + 1)) {
                        *e = 0;
                    }
                }
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = eval_limit {
                cfg.train.eval_limit = v;
            }
            if let Some(v) = pretrain_steps {
                cfg.pretrain.steps = v;
            }
            let variant = cfg.train.variant;
            variant.apply(&mut cfg.model);
            cfg.validate()?;
            train(&cfg, &data, &out, cache.as_deref(), resume.as_deref())?;
        }
        Cmd::Eval(args) => {
            let (report, _) = eval_checkpoint(&args)?;
            emit(args.out.as_deref(), &report_csv(&report))?;
            eprintln!("hr1 {:.4} valid_ratio {:.4} vhr1 {:.4}", report.hr1, report.valid_ratio, report.vhr1);
        }
        Cmd::PptEval(args) => {
            let (report, hash) = eval_checkpoint(&args)?;
            let p = report.ppt.context("checkpoint was trained without the proxy task")?;
            let csv = format!(
                "ppt_acc,ppt_valid_acc,valid_ratio,total,valid,correct,config_hash\n{},{},{},{},{},{},{}\n",
                p.acc, p.valid_acc, p.valid_ratio, p.total, p.valid, p.correct, hash
            );
            emit(args.out.as_deref(), &csv)?;
        }
        Cmd::Bench { mode, n_grid, points, ns, reps, out } => {
            let csv = match mode {
                BenchMode::ClosedForm => closed_form_bench(&n_grid, points)?,
                BenchMode::Empirical => empirical_bench(&ns, reps, seed.unwrap_or(0))?,
            };
            emit(out.as_deref(), &csv)?;
        }
        Cmd::Infer { checkpoint, data, split, index } => {
            let run = load_run(&checkpoint, &data)?;
            let samples = eval_samples(&run.dataset, split, run.cfg.seed)?;
            let s = samples.get(index).with_context(|| format!("{split:?} has {} examples", samples.len()))?;
            let fused = run.model.fused_table(&run.stack)?;
            let a = run.model.answer(&fused, s)?;
            let out = serde_json::json!({
                "history": s.history,
                "candidates": s.pool.candidates,
                "positive": s.pool.positive_index + 1,
                "proxy_positions": s.ppt.as_ref().map(|p| p.positions),
                "proxy_label": s.ppt.as_ref().map(|p| p.label),
                "proxy": a.proxy,
                "index": a.index,
                "tokens": a.tokens.iter().map(|t| t.and_then(|t| run.model.vocab.token(t))).collect::<Vec<_>>(),
                "config_hash": run.meta.config_hash,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Cmd::Inspect { checkpoint, diff } => {
            let (meta, store) = load_checkpoint(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            match diff {
                Some(other) => {
                    let (meta_b, store_b) = load_checkpoint(&other).with_context(|| format!("reading {}", other.display()))?;
                    check_hash(&meta_b.config_hash, &meta.config_hash)?;
                    for name in store_b.diff(&store).into_iter().filter(|n| !n.starts_with("optim/")) {
                        println!("{name}");
                    }
                }
                None => {
                    let mut shown = meta.clone();
                    shown.extra.remove(RUN_CONFIG_KEY);
                    println!("{}", serde_json::to_string(&shown)?);
                    for (name, t) in store.iter() {
                        let state = if store.is_frozen(name) { "frozen" } else { "trainable" };
                        println!("{name}\t{:?}\t{state}", t.shape());
                    }
                }
            }
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad number `{t}`")))
        .collect()
}

fn parse_triple(s: &str) -> Result<[usize; 3]> {
    let v = parse_list(s)?;
    ensure!(v.len() == 3, "expected three comma-separated values, got `{s}`");
    Ok([v[0], v[1], v[2]])
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(text.as_bytes())?),
    }
}

fn check_hash(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::HashMismatch { expected: expected.into(), found: found.into() }.into());
    }
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, cache: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let dataset = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    ensure!(
        cfg.model.pool_size == dataset.manifest.pool_size,
        "config pool_size {} differs from the dataset's {}",
        cfg.model.pool_size,
        dataset.manifest.pool_size
    );
    ensure!(
        cfg.model.n_max >= dataset.manifest.n_max,
        "config n_max {} is below the dataset's longest history {}",
        cfg.model.n_max,
        dataset.manifest.n_max
    );
    let hash = cfg.hash()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("run.toml"), cfg.to_toml()?)?;

    let (mut model, point) = match resume {
        Some(path) => {
            let (meta, params, point) = load_training_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            check_hash(&hash, &meta.config_hash)?;
            check_dataset(&meta, &dataset)?;
            eprintln!("resuming stage {} after {} epochs", point.stage, point.epochs_done);
            (restore_model(&dataset, &cfg.model, params, cfg.seed)?, Some(point))
        }
        None => {
            let cache = cache.unwrap_or(out);
            let base = if cfg.pretrain.steps > 0 {
                eprintln!("preparing decoder base ({} steps, cache {})", cfg.pretrain.steps, cache.display());
                Some(model_base(&dataset.catalog, &cfg.model, &cfg.pretrain, Some(cache), |r| {
                    eprintln!("  base step {:>6} loss {:.4} index acc {:.3}", r.step, r.loss, r.probe.index)
                })?)
            } else {
                None
            };
            (build_model(&dataset, &cfg.model, base.as_ref(), cfg.seed)?, None::<ResumePoint>)
        }
    };

    let mut trainer = Trainer::new(&dataset, &cfg.train, cfg.seed);
    trainer.config_hash = hash;
    trainer.out_dir = Some(out.to_path_buf());
    trainer.meta_extra = BTreeMap::from([
        (RUN_CONFIG_KEY.to_string(), cfg.to_toml()?),
        (DATASET_HASH_KEY.to_string(), dataset.manifest.config_hash.clone()),
    ]);
    trainer.on_record = Some(Box::new(|r: &LogRecord| {
        let ppt = r.ppt_valid_acc.map_or(String::new(), |v| format!(" ppt {v:.3}"));
        eprintln!(
            "stage {} epoch {} loss {:.4} hr1 {:.3} valid {:.3}{ppt} ({:.1}s)",
            r.stage, r.epoch, r.loss, r.hr1, r.valid_ratio, r.seconds
        );
    }));
    let outcome = trainer.run(&mut model, point)?;
    fs::write(out.join("audit.json"), serde_json::to_string_pretty(&outcome.audits)?)?;
    Ok(())
}

fn check_dataset(meta: &CheckpointMeta, dataset: &Dataset) -> Result<()> {
    match meta.extra.get(DATASET_HASH_KEY) {
        Some(h) => check_hash(h, &dataset.manifest.config_hash),
        None => bail!("checkpoint does not record its dataset"),
    }
}

struct LoadedRun {
    meta: CheckpointMeta,
    cfg: RunConfig,
    dataset: Dataset,
    model: SpeederModel,
    stack: Stack,
}

fn load_run(checkpoint: &Path, data: &Path) -> Result<LoadedRun> {
    let (meta, params, _) = load_training_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let text = meta.extra.get(RUN_CONFIG_KEY).context("checkpoint does not embed its run config")?;
    let cfg = RunConfig::from_toml_str(text)?;
    check_hash(&meta.config_hash, &cfg.hash()?)?;
    let dataset = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    check_dataset(&meta, &dataset)?;
    let modalities = parse_modalities(meta.extra.get("modalities").map(String::as_str).unwrap_or_default())?;
    let model = restore_model(&dataset, &cfg.model, params, cfg.seed)?;
    Ok(LoadedRun { meta, cfg, dataset, model, stack: Stack::of(&modalities) })
}

fn eval_checkpoint(args: &EvalArgs) -> Result<(speeder_core::eval::MetricsReport, String)> {
    let mut run = load_run(&args.checkpoint, &args.data)?;
    if args.no_proxy {
        run.model.cfg.eval_proxy = false;
    }
    if let Some(p) = &args.config {
        let mut cfg = RunConfig::load(p)?;
        let variant = cfg.train.variant;
        variant.apply(&mut cfg.model);
        check_hash(&run.meta.config_hash, &cfg.hash()?)?;
    }
    let samples = eval_samples(&run.dataset, args.split, run.cfg.seed)?;
    let mut report = evaluate(&run.model, &samples, &run.stack)?;
    report.config_hash = run.meta.config_hash.clone();
    Ok((report, run.meta.config_hash))
}

fn closed_form_bench(grid: &str, points: usize) -> Result<String> {
    let (lo, hi) = grid.split_once(':').context("--n-grid must be `lo:hi`")?;
    let (lo, hi): (u64, u64) = (lo.parse().context("bad grid start")?, hi.parse().context("bad grid end")?);
    ensure!(lo >= 1 && lo < hi, "grid needs 1 <= lo < hi");
    let base = CostParams::title_baseline(lo);
    let ours = CostParams::speeder(lo);
    let (lt, li) = improvement_limits(&base, &ours);
    let mut s = format!("# limit i_train {lt}\n# limit i_infer {li}\nn,train_base,train_ours,infer_base,infer_ours,i_train,i_infer\n");
    for p in cost_curve(&base, &ours, &log_grid(lo, hi, points))? {
        s += &format!("{},{},{},{},{},{},{}\n", p.n, p.train_base, p.train_ours, p.infer_base, p.infer_ours, p.i_train, p.i_infer);
    }
    Ok(s)
}

fn empirical_bench(ns: &str, reps: usize, seed: u64) -> Result<String> {
    let cfg = EmpiricalConfig { ns: parse_list(ns)?, reps, seed, ..EmpiricalConfig::default() };
    let mut s = String::from("n,mode,slots,formula_slots,t0,macs,seconds\n");
    for p in empirical_counters(&cfg)? {
        let mode = serde_json::to_value(p.mode)?;
        s += &format!("{},{},{},{},{},{},{}\n", p.n, mode.as_str().unwrap_or_default(), p.slots, p.formula_slots, p.t0, p.macs, p.seconds);
    }
    Ok(s)
}
