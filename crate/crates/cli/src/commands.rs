//! Command implementations. Every command resolves and validates all of its
//! inputs before creating the output workspace, so a failed invocation
//! leaves no artifacts and no manifest behind.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde_json::json;

use profitlab::data::{
    gen_synthetic, load_jsonl, load_labels, save_jsonl, save_labels, vocab_from_samples, Category,
    Sample, SyntheticSpec, Vocab,
};
use profitlab::model::{init_model, load_checkpoint, ModelConfig, TransformerModel};
use profitlab::objectives::{Mode, Objective, DEFAULT_RHO, DEFAULT_TAU};
use profitlab::stats::{
    kde, mann_whitney, profile_csv, rank_sweep_table, silverman_bandwidth, threshold_sweep_table,
    trajectory_table, MwuMethod, TokenRecord,
};
use profitlab::theory::{certification_sweep, sweep_csv_rows, SweepConfig, SWEEP_HEADER};
use profitlab::train::{
    evaluate, rank_points, sweep, threshold_points, trajectory_points, SweepAxis, SweepInit,
    SweepRun, TrainConfig, TrainIo,
};
use profitlab::{Error, Result};

use crate::manifest::Workspace;
use crate::plot;

/// Flags shared by every command, already resolved against the environment.
#[derive(Debug, Clone)]
pub struct Common {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub threads: usize,
}

impl Common {
    pub fn resolve(
        out_dir: Option<PathBuf>,
        seed: Option<u64>,
        deterministic: bool,
        threads: usize,
    ) -> Result<Common> {
        if threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let out_dir = out_dir
            .or_else(|| std::env::var_os("PROFITLAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Common {
            out_dir,
            seed,
            deterministic,
            threads,
        })
    }

    fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }

    /// Seals the workspace manifest with the global flags folded into the
    /// effective config echo.
    fn finish(&self, ws: Workspace, command: &str, mut config: serde_json::Value) -> Result<()> {
        config["deterministic"] = json!(self.deterministic);
        config["threads"] = json!(self.threads);
        ws.finish(command, config)
    }
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "above" => Ok(Mode::Above),
        "below" => Ok(Mode::Below),
        other => Err(Error::Config(format!(
            "mode: expected above|below, got {other:?}"
        ))),
    }
}

fn parse_f64_list(flag: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("{flag}: expected a number, got {t:?}")))
        })
        .collect()
}

fn parse_usize_list(flag: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("{flag}: expected an integer, got {t:?}")))
        })
        .collect()
}

/// Objective override flags shared by train and the sweep commands.
/// The probability/entropy knobs feed whichever objective they name;
/// naming one the active objective lacks is a configuration error.
#[derive(Debug, Clone, Default, Args)]
pub struct OverrideArgs {
    /// Replace the configured objective
    /// (standard_sft | dft | profit | entropy_gate | multi_ref)
    #[arg(long)]
    pub objective: Option<String>,
    /// ProFit probability threshold
    #[arg(long)]
    pub tau: Option<f64>,
    /// ProFit masking mode (above | below)
    #[arg(long)]
    pub mode: Option<String>,
    /// Normalize ProFit by the unmasked count instead of T
    #[arg(long)]
    pub unmasked_norm: Option<bool>,
    /// Entropy-gate supervision fraction
    #[arg(long)]
    pub rho: Option<f64>,
    /// Reference count for multi_ref
    #[arg(long)]
    pub k: Option<usize>,
    /// Inner objective tag for multi_ref
    #[arg(long)]
    pub inner: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Global gradient-norm cap, or "none"
    #[arg(long)]
    pub grad_clip: Option<String>,
    /// Evaluate the held-out set every N optimizer steps
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Collation length in token positions
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Adapter rank; any lora flag switches adapters on
    #[arg(long)]
    pub lora_r: Option<usize>,
    /// Adapter scale; 0 selects the 2r convention
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    /// Comma-separated parameter names or suffixes to adapt
    #[arg(long)]
    pub lora_targets: Option<String>,
}

impl OverrideArgs {
    fn build_objective(&self, tag: &str) -> Result<Objective> {
        let leaf = |tag: &str| -> Result<Objective> {
            Ok(match tag {
                "standard_sft" => Objective::StandardSft,
                "dft" => Objective::Dft,
                "profit" => Objective::Profit {
                    tau: self.tau.unwrap_or(DEFAULT_TAU),
                    mode: match &self.mode {
                        Some(m) => parse_mode(m)?,
                        None => Mode::default(),
                    },
                    unmasked_norm: self.unmasked_norm.unwrap_or(false),
                },
                "entropy_gate" => Objective::EntropyGate {
                    rho: self.rho.unwrap_or(DEFAULT_RHO),
                },
                other => {
                    return Err(Error::Config(format!("objective: unknown tag {other:?}")))
                }
            })
        };
        if tag == "multi_ref" {
            Ok(Objective::MultiRef {
                k: self
                    .k
                    .ok_or_else(|| Error::Config("multi_ref objective needs --k".into()))?,
                inner: Box::new(leaf(self.inner.as_deref().unwrap_or("standard_sft"))?),
            })
        } else {
            leaf(tag)
        }
    }

    pub fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        if let Some(tag) = &self.objective {
            config.objective = self.build_objective(tag)?;
        } else {
            if self.k.is_some() || self.inner.is_some() {
                return Err(Error::Config(
                    "--k and --inner require --objective multi_ref".into(),
                ));
            }
            if self.tau.is_some() || self.mode.is_some() || self.unmasked_norm.is_some() {
                match &mut config.objective {
                    Objective::Profit {
                        tau,
                        mode,
                        unmasked_norm,
                    } => {
                        if let Some(t) = self.tau {
                            *tau = t;
                        }
                        if let Some(m) = &self.mode {
                            *mode = parse_mode(m)?;
                        }
                        if let Some(u) = self.unmasked_norm {
                            *unmasked_norm = u;
                        }
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "--tau/--mode/--unmasked-norm need a profit objective, not {}",
                            other.tag()
                        )))
                    }
                }
            }
            if let Some(r) = self.rho {
                match &mut config.objective {
                    Objective::EntropyGate { rho } => *rho = r,
                    other => {
                        return Err(Error::Config(format!(
                            "--rho needs an entropy_gate objective, not {}",
                            other.tag()
                        )))
                    }
                }
            }
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.grad_accum {
            config.grad_accum = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = &self.grad_clip {
            config.grad_clip = if v == "none" {
                None
            } else {
                Some(v.parse().map_err(|_| {
                    Error::Config(format!("grad_clip: expected a number or none, got {v:?}"))
                })?)
            };
        }
        if let Some(v) = self.eval_every {
            config.eval_every_steps = v;
        }
        if let Some(v) = self.max_len {
            config.max_len = v;
        }
        if self.lora_r.is_some() || self.lora_alpha.is_some() || self.lora_targets.is_some() {
            let mut lora = config.lora.clone().unwrap_or_default();
            if let Some(r) = self.lora_r {
                lora.r = r;
            }
            if let Some(a) = self.lora_alpha {
                lora.alpha = a;
            }
            if let Some(t) = &self.lora_targets {
                lora.targets = t
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            config.lora = Some(lora);
        }
        Ok(())
    }
}

/// Architecture of a freshly initialized model; ignored when a command
/// warm-starts from a checkpoint, which carries its own architecture.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    /// Vocabulary size cap when building from the training data
    #[arg(long, default_value_t = 512)]
    pub vocab_cap: usize,
}

impl ModelArgs {
    fn config(&self, vocab_size: usize, max_seq_len: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len,
            seed,
        }
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(path) => TrainConfig::load(path).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        }),
        None => Ok(TrainConfig::default()),
    }
}

fn load_vocab(path: Option<&Path>, samples: &[Sample], cap: usize) -> Result<Vocab> {
    match path {
        Some(path) => Vocab::load(path),
        None => vocab_from_samples(samples, cap),
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// How many of the prompt templates to draw from
    #[arg(long, default_value_t = 10)]
    pub templates: usize,
    /// Operands range over 0..=max_arg
    #[arg(long, default_value_t = 20)]
    pub max_arg: u32,
    #[arg(long, default_value = "syn")]
    pub id_prefix: String,
    /// Held-out samples split from the end (default: samples / 10)
    #[arg(long)]
    pub heldout: Option<usize>,
}

pub fn gen_synthetic_cmd(common: &Common, args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        samples: args.samples,
        templates: args.templates,
        max_arg: args.max_arg,
        id_prefix: args.id_prefix.clone(),
    };
    let seed = common.seed_or(0);
    let (samples, labels) = gen_synthetic(&spec, seed)?;
    let heldout_n = args.heldout.unwrap_or(args.samples / 10);
    if heldout_n >= samples.len() {
        return Err(Error::Config(format!(
            "heldout {} must leave at least one training sample out of {}",
            heldout_n,
            samples.len()
        )));
    }
    let split = samples.len() - heldout_n;
    let mut ws = Workspace::create(&common.out_dir)?;
    save_jsonl(&samples[..split], &ws.path("train.jsonl"))?;
    ws.track("train.jsonl")?;
    save_jsonl(&samples[split..], &ws.path("heldout.jsonl"))?;
    ws.track("heldout.jsonl")?;
    save_labels(&labels, &ws.path("labels.jsonl"))?;
    ws.track("labels.jsonl")?;
    println!(
        "wrote {} train and {} held-out samples ({} label entries)",
        split,
        heldout_n,
        labels.len()
    );
    common.finish(
        ws,
        "gen-synthetic",
        json!({
            "samples": args.samples,
            "templates": args.templates,
            "max_arg": args.max_arg,
            "id_prefix": args.id_prefix,
            "heldout": heldout_n,
            "seed": seed,
        }),
    )
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config file, JSON or key=value lines; defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training samples (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out samples for periodic evaluation (JSONL)
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Existing vocabulary file; built from the data when omitted
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Warm-start checkpoint; a fresh model is initialized when omitted
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Stream per-token diagnostics to diagnostics.csv
    #[arg(long)]
    pub diagnostics: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

pub fn train_cmd(common: &Common, args: &TrainArgs) -> Result<()> {
    let mut config = load_train_config(args.config.as_deref())?;
    args.overrides.apply(&mut config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    let samples = load_jsonl(&args.data)?;
    let heldout = args.heldout.as_deref().map(load_jsonl).transpose()?;
    let vocab = load_vocab(args.vocab.as_deref(), &samples, args.model.vocab_cap)?;
    let mut model = match &args.init_from {
        Some(path) => load_checkpoint(path)?.0,
        None => init_model(&args.model.config(vocab.size(), config.max_len, config.seed))?,
    };
    let model_config = model.config.clone();

    let mut ws = Workspace::create(&common.out_dir)?;
    vocab.save(&ws.path("vocab.txt"))?;
    ws.track("vocab.txt")?;
    let ckpt_dir = ws.path("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut diag_file = match args.diagnostics {
        true => Some(std::io::BufWriter::new(std::fs::File::create(
            ws.path("diagnostics.csv"),
        )?)),
        false => None,
    };
    let io = TrainIo {
        heldout: heldout.as_deref(),
        checkpoint_dir: Some(&ckpt_dir),
        diagnostics: diag_file
            .as_mut()
            .map(|w| w as &mut dyn std::io::Write),
    };
    let log = profitlab::train::train(&config, &mut model, &samples, &vocab, io)?;
    if let Some(mut w) = diag_file.take() {
        w.flush()?;
        drop(w);
        ws.track("diagnostics.csv")?;
    }
    ws.write("steps.csv", &log.steps_csv())?;
    ws.write("evals.csv", &log.evals_csv())?;
    for epoch in 1..=config.epochs {
        ws.track(&format!("checkpoints/checkpoint_epoch{epoch}.pfl"))?;
    }
    println!(
        "trained {} optimizer steps over {} windows ({} skipped)",
        log.optimizer_steps, log.windows, log.skipped_windows
    );
    if let Some(eval) = log.evals.last() {
        println!(
            "final heldout: token_accuracy={} answer_em={} perplexity={}",
            eval.metrics.token_accuracy, eval.metrics.answer_em, eval.metrics.perplexity
        );
    }
    common.finish(
        ws,
        "train",
        json!({
            "train": config,
            "model": model_config,
            "data": args.data,
            "heldout": args.heldout,
            "vocab": args.vocab,
            "init_from": args.init_from,
        }),
    )
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Samples to evaluate (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

pub fn eval_cmd(common: &Common, args: &EvalArgs) -> Result<()> {
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::load(&args.vocab)?;
    let samples = load_jsonl(&args.data)?;
    let metrics = evaluate(&model, &samples, &vocab, args.max_len)?;
    let mut ws = Workspace::create(&common.out_dir)?;
    ws.write(
        "metrics.csv",
        &format!(
            "token_accuracy,answer_em,perplexity,supervised_tokens\n{},{},{},{}\n",
            metrics.token_accuracy, metrics.answer_em, metrics.perplexity,
            metrics.supervised_tokens
        ),
    )?;
    println!(
        "token_accuracy={} answer_em={} perplexity={} over {} supervised tokens",
        metrics.token_accuracy, metrics.answer_em, metrics.perplexity, metrics.supervised_tokens
    );
    common.finish(
        ws,
        "eval",
        json!({
            "checkpoint": args.checkpoint,
            "vocab": args.vocab,
            "data": args.data,
            "max_len": args.max_len,
            "objective": meta.objective,
            "step": meta.step,
        }),
    )
}

/// Inputs shared by the three sweep commands.
#[derive(Debug, Args)]
pub struct SweepIoArgs {
    /// Base training config applied at every grid point
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training samples (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out samples scored at each epoch end (JSONL)
    #[arg(long)]
    pub heldout: PathBuf,
    /// Existing vocabulary file; built from the data when omitted
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Shared warm-start checkpoint for every grid point
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

struct SweepSetup {
    base: TrainConfig,
    train_set: Vec<Sample>,
    heldout: Vec<Sample>,
    vocab: Vocab,
    /// Present when warm-starting; every point copies this model.
    warm: Option<TransformerModel>,
    fresh: ModelConfig,
}

impl SweepSetup {
    fn init(&self) -> SweepInit<'_> {
        match &self.warm {
            Some(model) => SweepInit::Warm(model),
            None => SweepInit::Fresh(&self.fresh),
        }
    }

    fn d_model(&self) -> usize {
        match &self.warm {
            Some(model) => model.config.d_model,
            None => self.fresh.d_model,
        }
    }

    fn config_echo(&self, io: &SweepIoArgs) -> serde_json::Value {
        json!({
            "base": self.base,
            "model": match &self.warm {
                Some(model) => model.config.clone(),
                None => self.fresh.clone(),
            },
            "data": io.data,
            "heldout": io.heldout,
            "vocab": io.vocab,
            "init_from": io.init_from,
        })
    }
}

fn sweep_setup(common: &Common, io: &SweepIoArgs) -> Result<SweepSetup> {
    let mut base = load_train_config(io.config.as_deref())?;
    io.overrides.apply(&mut base)?;
    if let Some(seed) = common.seed {
        base.seed = seed;
    }
    base.validate()?;
    let train_set = load_jsonl(&io.data)?;
    let heldout = load_jsonl(&io.heldout)?;
    let vocab = load_vocab(io.vocab.as_deref(), &train_set, io.model.vocab_cap)?;
    let warm = io
        .init_from
        .as_deref()
        .map(|p| load_checkpoint(p).map(|(m, _)| m))
        .transpose()?;
    let fresh = io.model.config(vocab.size(), base.max_len, base.seed);
    Ok(SweepSetup {
        base,
        train_set,
        heldout,
        vocab,
        warm,
        fresh,
    })
}

const RUNS_HEADER: &str = "label,error,supervised_fraction,token_accuracy,answer_em,perplexity";

fn runs_csv(runs: &[SweepRun]) -> String {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for run in runs {
        let error = run.error.as_deref().unwrap_or("").replace(',', ";");
        let frac = run
            .supervised_fraction
            .map(|f| f.to_string())
            .unwrap_or_default();
        let (acc, em, ppl) = match run.final_metrics() {
            Some(m) => (
                m.token_accuracy.to_string(),
                m.answer_em.to_string(),
                m.perplexity.to_string(),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{error},{frac},{acc},{em},{ppl}\n",
            run.label
        ));
    }
    out
}

fn print_runs(runs: &[SweepRun]) {
    for run in runs {
        match (&run.error, run.final_metrics()) {
            (Some(err), _) => println!("{}: failed: {err}", run.label),
            (None, Some(m)) => println!(
                "{}: token_accuracy={} answer_em={} perplexity={}",
                run.label, m.token_accuracy, m.answer_em, m.perplexity
            ),
            (None, None) => println!("{}: no evaluations", run.label),
        }
    }
}

/// Runs the grid, always writing `runs.csv`; the tidy table and manifest
/// appear only when every point succeeded.
fn finish_sweep(
    common: &Common,
    command: &str,
    mut ws: Workspace,
    runs: &[SweepRun],
    table_name: &str,
    table: Result<String>,
    config_echo: serde_json::Value,
) -> Result<()> {
    ws.write("runs.csv", &runs_csv(runs))?;
    print_runs(runs);
    ws.write(table_name, &table?)?;
    println!("wrote {table_name} ({} points)", runs.len());
    common.finish(ws, command, config_echo)
}

#[derive(Debug, Args)]
pub struct SweepThresholdArgs {
    #[command(flatten)]
    pub io: SweepIoArgs,
    /// Comma-separated ProFit thresholds
    #[arg(long, default_value = "0.05,0.1,0.2,0.3,0.5")]
    pub taus: String,
    /// Comma-separated masking modes
    #[arg(long, default_value = "above,below")]
    pub modes: String,
}

pub fn sweep_threshold_cmd(common: &Common, args: &SweepThresholdArgs) -> Result<()> {
    let taus = parse_f64_list("taus", &args.taus)?;
    let modes = args
        .modes
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(parse_mode)
        .collect::<Result<Vec<_>>>()?;
    let setup = sweep_setup(common, &args.io)?;
    let axis = SweepAxis::Threshold {
        taus: taus.clone(),
        modes: modes.clone(),
    };
    let runs = sweep(
        &axis,
        &setup.base,
        setup.init(),
        &setup.train_set,
        &setup.heldout,
        &setup.vocab,
    )?;
    let expected: Vec<(f64, Mode)> = modes
        .iter()
        .flat_map(|&m| taus.iter().map(move |&t| (t, m)))
        .collect();
    let ws = Workspace::create(&common.out_dir)?;
    let table = threshold_points(&runs).and_then(|p| threshold_sweep_table(&p, &expected));
    let mut echo = setup.config_echo(&args.io);
    echo["taus"] = json!(taus);
    echo["modes"] = json!(modes.iter().map(Mode::to_string).collect::<Vec<_>>());
    finish_sweep(
        common,
        "sweep-threshold",
        ws,
        &runs,
        "threshold_sweep.csv",
        table,
        echo,
    )
}

fn parse_objectives(list: &str, overrides: &OverrideArgs) -> Result<Vec<Objective>> {
    let objectives = list
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| overrides.build_objective(t))
        .collect::<Result<Vec<_>>>()?;
    if objectives.is_empty() {
        return Err(Error::Config("objectives: empty list".into()));
    }
    Ok(objectives)
}

#[derive(Debug, Args)]
pub struct SweepRankArgs {
    #[command(flatten)]
    pub io: SweepIoArgs,
    /// Comma-separated adapter ranks; ranks ≥ the smallest target
    /// dimension are dropped with a notice
    #[arg(long, default_value = "4,8,16,32,64,128,256,512,1024")]
    pub ranks: String,
    /// Comma-separated objective tags, one rank curve each
    #[arg(long, default_value = "standard_sft,profit")]
    pub objectives: String,
}

pub fn sweep_rank_cmd(common: &Common, args: &SweepRankArgs) -> Result<()> {
    let grid = parse_usize_list("ranks", &args.ranks)?;
    let objectives = parse_objectives(&args.objectives, &args.io.overrides)?;
    let setup = sweep_setup(common, &args.io)?;
    // Adapters need r < min(d_in, d_out); the default attention targets
    // are square d_model matrices.
    let cap = setup.d_model();
    let (ranks, dropped): (Vec<usize>, Vec<usize>) = grid.iter().partition(|&&r| r < cap);
    if !dropped.is_empty() {
        println!(
            "dropping ranks not below d_model={cap}: {}",
            dropped
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    if ranks.is_empty() {
        return Err(Error::Config(format!(
            "rank sweep: no requested rank is below d_model={cap}"
        )));
    }
    let axis = SweepAxis::Rank {
        objectives: objectives.clone(),
        ranks: ranks.clone(),
    };
    let runs = sweep(
        &axis,
        &setup.base,
        setup.init(),
        &setup.train_set,
        &setup.heldout,
        &setup.vocab,
    )?;
    let tags: Vec<String> = objectives.iter().map(|o| o.tag().to_string()).collect();
    let ws = Workspace::create(&common.out_dir)?;
    let table = rank_points(&runs).and_then(|p| rank_sweep_table(&p, &tags, &ranks));
    let mut echo = setup.config_echo(&args.io);
    echo["ranks"] = json!(ranks);
    echo["objectives"] = json!(tags);
    finish_sweep(common, "sweep-rank", ws, &runs, "rank_sweep.csv", table, echo)
}

#[derive(Debug, Args)]
pub struct SweepEpochsArgs {
    #[command(flatten)]
    pub io: SweepIoArgs,
    /// Epochs to train; every epoch end contributes a trajectory point
    #[arg(long, default_value_t = 5)]
    pub max_epochs: usize,
    /// Comma-separated objective tags, one trajectory each
    #[arg(long, default_value = "standard_sft,profit")]
    pub objectives: String,
}

pub fn sweep_epochs_cmd(common: &Common, args: &SweepEpochsArgs) -> Result<()> {
    let objectives = parse_objectives(&args.objectives, &args.io.overrides)?;
    let setup = sweep_setup(common, &args.io)?;
    let axis = SweepAxis::Epochs {
        objectives: objectives.clone(),
        max: args.max_epochs,
    };
    let runs = sweep(
        &axis,
        &setup.base,
        setup.init(),
        &setup.train_set,
        &setup.heldout,
        &setup.vocab,
    )?;
    let tags: Vec<String> = objectives.iter().map(|o| o.tag().to_string()).collect();
    let ws = Workspace::create(&common.out_dir)?;
    let table =
        trajectory_points(&runs).and_then(|p| trajectory_table(&p, &tags, args.max_epochs));
    let mut echo = setup.config_echo(&args.io);
    echo["max_epochs"] = json!(args.max_epochs);
    echo["objectives"] = json!(tags);
    finish_sweep(common, "sweep-epochs", ws, &runs, "trajectory.csv", table, echo)
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Samples to profile (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Core/trivial position labels (JSONL)
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

fn method_name(method: MwuMethod) -> &'static str {
    match method {
        MwuMethod::ExactEnumeration => "exact_enumeration",
        MwuMethod::MonteCarloPermutation => "monte_carlo_permutation",
        MwuMethod::NormalApprox => "normal_approx",
    }
}

fn probs_of(records: &[TokenRecord], category: Category) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.category == category)
        .map(|r| r.p)
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn analyze_probs_cmd(common: &Common, args: &AnalyzeArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::load(&args.vocab)?;
    let samples = load_jsonl(&args.data)?;
    let labels = load_labels(&args.labels)?;
    let records = profitlab::stats::profile_tokens(&model, &samples, &vocab, &labels, args.max_len)?;
    let core = probs_of(&records, Category::Core);
    let trivial = probs_of(&records, Category::Trivial);
    if core.is_empty() || trivial.is_empty() {
        return Err(Error::Data(format!(
            "need both labeled groups populated, got {} core and {} trivial tokens",
            core.len(),
            trivial.len()
        )));
    }
    let test = mann_whitney(&core, &trivial)?;
    let h_core = silverman_bandwidth(&core);
    let h_trivial = silverman_bandwidth(&trivial);
    let core_curve = kde(&core, h_core)?;
    let trivial_curve = kde(&trivial, h_trivial)?;

    let mut ws = Workspace::create(&common.out_dir)?;
    ws.write("profile.csv", &profile_csv(&records))?;
    ws.write("density_core.csv", &core_curve.csv())?;
    ws.write("density_trivial.csv", &trivial_curve.csv())?;
    let stats = json!({
        "u": test.u,
        "p_value": test.p_value,
        "method": method_name(test.method),
        "n_core": core.len(),
        "n_trivial": trivial.len(),
        "mean_core": mean(&core),
        "mean_trivial": mean(&trivial),
        "bandwidth_core": h_core,
        "bandwidth_trivial": h_trivial,
    });
    ws.write(
        "stats.json",
        &format!("{}\n", serde_json::to_string_pretty(&stats)?),
    )?;
    println!(
        "core: n={} mean_p={:.4}; trivial: n={} mean_p={:.4}",
        core.len(),
        mean(&core),
        trivial.len(),
        mean(&trivial)
    );
    println!(
        "U={} p={:.3e} ({})",
        test.u,
        test.p_value,
        method_name(test.method)
    );
    common.finish(
        ws,
        "analyze-probs",
        json!({
            "checkpoint": args.checkpoint,
            "vocab": args.vocab,
            "data": args.data,
            "labels": args.labels,
            "max_len": args.max_len,
        }),
    )
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    #[arg(long, default_value_t = 8)]
    pub vocab: usize,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 6)]
    pub seq_len: usize,
}

pub fn verify_theory_cmd(common: &Common, args: &VerifyArgs) -> Result<()> {
    let cfg = SweepConfig {
        draws: args.draws,
        vocab_size: args.vocab,
        d_model: args.d_model,
        n_layers: args.n_layers,
        n_heads: args.n_heads,
        seq_len: args.seq_len,
        seed: common.seed_or(0),
    };
    let rows = certification_sweep(&cfg)?;
    let violations = rows
        .iter()
        .filter(|r| r.report.verdict() == "bound violated")
        .count();
    let assumption = rows
        .iter()
        .filter(|r| r.report.verdict() == "assumption violated")
        .count();
    let mut ws = Workspace::create(&common.out_dir)?;
    ws.write(
        "theory_sweep.csv",
        &format!("{SWEEP_HEADER}\n{}", sweep_csv_rows(&rows)),
    )?;
    println!(
        "violations: {violations} (draws: {}, assumption violated: {assumption})",
        rows.len()
    );
    if violations > 0 {
        return Err(Error::Numeric(format!(
            "{violations} of {} draws violate the bound",
            rows.len()
        )));
    }
    common.finish(
        ws,
        "verify-theory",
        json!({
            "draws": cfg.draws,
            "vocab": cfg.vocab_size,
            "d_model": cfg.d_model,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "seq_len": cfg.seq_len,
            "seed": cfg.seed,
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Density,
    Sweep,
    Trajectory,
}

impl PlotKind {
    fn name(self) -> &'static str {
        match self {
            PlotKind::Density => "density",
            PlotKind::Sweep => "sweep",
            PlotKind::Trajectory => "trajectory",
        }
    }
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Chart family matching the input table schema
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Input CSV tables
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

pub fn plot_cmd(common: &Common, args: &PlotArgs) -> Result<()> {
    let charts: Vec<(String, String)> = match args.kind {
        PlotKind::Density => {
            let mut tables = Vec::new();
            for path in &args.inputs {
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                tables.push((label, plot::read_table(path)?));
            }
            vec![("density.svg".to_string(), plot::density_chart(&tables)?)]
        }
        PlotKind::Sweep | PlotKind::Trajectory => {
            if args.inputs.len() != 1 {
                return Err(Error::Config(format!(
                    "plot --kind {} takes exactly one table, got {}",
                    args.kind.name(),
                    args.inputs.len()
                )));
            }
            let table = plot::read_table(&args.inputs[0])?;
            match args.kind {
                PlotKind::Sweep => plot::sweep_charts(&table)?,
                _ => plot::trajectory_charts(&table)?,
            }
        }
    };
    let mut ws = Workspace::create(&common.out_dir)?;
    for (name, svg) in &charts {
        ws.write(name, svg)?;
        println!("wrote {name}");
    }
    common.finish(
        ws,
        "plot",
        json!({
            "kind": args.kind.name(),
            "inputs": args.inputs,
        }),
    )
}
