//! Command-line entry point. Precedence for every setting is
//! flag > `AU_SPREAD_SEED` (seed only) > `--config` file > built-in default.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, EncoderKind, ExperimentConfig, HyperParams, KlDirection, ModelConfig};
use crate::error::{Error, Result};
use crate::evaluation::{ablation_table, label_budget_sweep, write_ablation_csv, write_sweep_csv};
use crate::models::checkpoint;
use crate::synthdata::{coverage_table, generate_corpus, write_coverage_csv, LabeledCorpus, SampleMode};
use crate::trainer::{evaluate_split, run_experiment, FileSink, TrainReport};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_INTERRUPTED: i32 = 130;

#[derive(Debug, Parser)]
#[command(name = "au-spread", version, about = "Semi-supervised AU detection from clips with one labeled frame each")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Generate a synthetic corpus directory.
    GenData(GenDataArgs),
    /// Train one model and write runs/<name>/.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train every ablation variant and write a table.
    Ablate(AblateArgs),
    /// Train across label budgets and sampling modes.
    Sweep(SweepArgs),
    /// Unique visible label combinations per budget (no training).
    Coverage(CoverageArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment file whose `[data.synth]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub aus: Option<usize>,
}

/// Experiment settings shared by every training subcommand.
#[derive(Debug, Default, Args)]
pub struct ExperimentArgs {
    /// TOML experiment file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory written by `gen-data`; generated from `[data.synth]` when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the generated corpus [default: 0].
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Fraction of frames with a visible label [default: 0.1].
    #[arg(long)]
    pub label_ratio: Option<f64>,
    /// strided | contiguous [default: strided].
    #[arg(long)]
    pub sample_mode: Option<SampleMode>,
    /// Held-out fraction of sequences [default: 0.2].
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Frames per clip n [default: 5].
    #[arg(long)]
    pub clip_len: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cosine-anneal the learning rate over the run [default: false].
    #[arg(long)]
    pub lr_cosine: Option<bool>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Spatial loss weight [default: 0.5].
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Temporal loss weight [default: 0.5].
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Perturbation loss weight [default: 0.2].
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Pseudo-label loss weight [default: 0.25].
    #[arg(long)]
    pub lambda4: Option<f64>,
    /// Weight of the distillation term inside the composite losses [default: 0.5].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Distillation temperature [default: 1].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Ramp-up length in epochs [default: 5].
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// First epoch whose pseudo labels may be used [default: 3].
    #[arg(long)]
    pub tpl_start_epoch: Option<usize>,
    /// target-to-model | model-to-target [default: target-to-model].
    #[arg(long)]
    pub kl_direction: Option<KlDirection>,
    /// no-sil | no-ksm | no-tpl | baseline (or full).
    #[arg(long)]
    pub ablate: Option<Ablation>,
    /// transformer | mlp [default: transformer].
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Weight pseudo-label BCE like the supervised term [default: true].
    #[arg(long)]
    pub pseudo_positive_weights: Option<bool>,
    /// Also train on clips without any visible label, from `--unlabeled-start-epoch` on.
    #[arg(long)]
    pub unlabeled_clips: Option<bool>,
    /// [default: 10]
    #[arg(long)]
    pub unlabeled_start_epoch: Option<usize>,
    /// Run directory name under `--out-dir` [default: default].
    #[arg(long)]
    pub name: Option<String>,
    /// [default: runs]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// [default: 10]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Validate on every k-th frame [default: 1].
    #[arg(long)]
    pub eval_stride: Option<usize>,
    /// Validate every k epochs [default: 1].
    #[arg(long)]
    pub eval_every: Option<usize>,
}

impl ExperimentArgs {
    /// File (or defaults), then environment, then flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set! {
            seed => seed,
            data_seed => data.synth.seed,
            label_ratio => data.label_ratio,
            sample_mode => data.sample_mode,
            val_fraction => data.val_fraction,
            epochs => hyper.epochs,
            batch_size => hyper.batch_size,
            lr => hyper.lr,
            lr_cosine => hyper.lr_cosine,
            momentum => hyper.momentum,
            lambda1 => hyper.lambda1,
            lambda2 => hyper.lambda2,
            lambda3 => hyper.lambda3,
            lambda4 => hyper.lambda4,
            alpha => hyper.alpha,
            temperature => hyper.temperature,
            warmup_epochs => hyper.warmup_epochs,
            tpl_start_epoch => hyper.tpl_start_epoch,
            kl_direction => hyper.kl_direction,
            ablate => ablation,
            encoder => model.encoder,
            pseudo_positive_weights => hyper.pseudo_positive_weights,
            unlabeled_clips => hyper.unlabeled_clips,
            unlabeled_start_epoch => hyper.unlabeled_start_epoch,
            name => run.name,
            out_dir => run.out_dir,
            checkpoint_every => run.checkpoint_every,
            eval_stride => run.eval_stride,
            eval_every => run.eval_every,
        }
        if let Some(n) = self.clip_len {
            cfg.hyper.clip_len = n;
            cfg.model.clip_len = n;
        }
        if let Some(dir) = &self.corpus {
            cfg.data.corpus = Some(dir.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Re-run the experiment recorded in a `manifest.json`; other flags are ignored except `--name`/`--out-dir`.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of the run that produced the checkpoint; defaults to the one next to it.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Comma-separated variants [default: all five].
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Ablation>>,
    /// CSV destination (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.5,1.0")]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "strided")]
    pub modes: Vec<SampleMode>,
    /// Comma-separated clip lengths; one sweep per length.
    #[arg(long, value_delimiter = ',')]
    pub clip_lens: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.05,0.1,0.2,0.5")]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "strided,contiguous")]
    pub modes: Vec<SampleMode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to replay a run; written before the first training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    /// Hyper-parameters and model shape after the ablation was applied.
    pub resolved_hyper: HyperParams,
    pub resolved_model: ModelConfig,
    pub seed: u64,
    pub code_version: String,
    pub corpus_hash: String,
    pub out_dir: PathBuf,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, corpus: &LabeledCorpus) -> Self {
        let (resolved_hyper, resolved_model) = config.resolved();
        Self {
            config: config.clone(),
            resolved_hyper,
            resolved_model,
            seed: config.seed,
            code_version: code_version(),
            corpus_hash: corpus.content_hash(),
            out_dir: config.run.run_dir(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn code_version() -> String {
    let describe = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    format!("{} ({describe})", env!("CARGO_PKG_VERSION"))
}

static STOP: OnceLock<Arc<AtomicBool>> = OnceLock::new();

fn stop_flag() -> Arc<AtomicBool> {
    STOP.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let handler_flag = flag.clone();
        // A second registration fails inside test harnesses; the flag still works.
        let _ = ctrlc::set_handler(move || handler_flag.store(true, Ordering::SeqCst));
        flag
    })
    .clone()
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<LabeledCorpus> {
    match &cfg.data.corpus {
        Some(dir) => LabeledCorpus::load(dir),
        None => generate_corpus(&cfg.data.synth),
    }
}

/// Trains `cfg` into `cfg.run.run_dir()`: manifest, metrics, events, checkpoints and report.
pub fn execute_run(cfg: &ExperimentConfig, corpus: &LabeledCorpus) -> Result<TrainReport> {
    let dir = cfg.run.run_dir();
    fs::create_dir_all(&dir)?;
    RunManifest::new(cfg, corpus).save(&dir.join("manifest.json"))?;
    let mut sink = FileSink::create(&dir, cfg.run.checkpoint_every, cfg.hyper.epochs, stop_flag())?;
    let (_, report) = run_experiment(cfg, corpus, &mut sink)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Box::new(fs::File::create(p)?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut synth = match &args.config {
        Some(path) => ExperimentConfig::load(path)?.data.synth,
        None => Default::default(),
    };
    if let Some(v) = args.seed {
        synth.seed = v;
    }
    if let Some(v) = args.sequences {
        synth.num_sequences = v;
    }
    if let Some(v) = args.frames {
        synth.frames_per_sequence = v;
    }
    if let Some(v) = args.aus {
        synth.num_aus = v;
    }
    let corpus = generate_corpus(&synth)?;
    corpus.save(&args.out)?;
    println!("wrote {} sequences to {} ({})", corpus.sequences.len(), args.out.display(), corpus.content_hash());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = match &args.replay {
        Some(path) => {
            let manifest = RunManifest::load(path)?;
            let mut cfg = manifest.config;
            if let Some(name) = &args.experiment.name {
                cfg.run.name = name.clone();
            }
            if let Some(dir) = &args.experiment.out_dir {
                cfg.run.out_dir = dir.clone();
            }
            let corpus = load_corpus(&cfg)?;
            if corpus.content_hash() != manifest.corpus_hash {
                return Err(Error::Data(format!("corpus no longer matches the hash recorded in {}", path.display())));
            }
            return finish_train(&cfg, &corpus);
        }
        None => args.experiment.resolve()?,
    };
    let corpus = load_corpus(&cfg)?;
    finish_train(&cfg, &corpus)
}

fn finish_train(cfg: &ExperimentConfig, corpus: &LabeledCorpus) -> Result<()> {
    let report = execute_run(cfg, corpus)?;
    println!("{}: macro F1 {:.4} after {} epochs", cfg.run.run_dir().display(), report.final_val_f1(), report.epochs.len());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let manifest_path = match &args.manifest {
        Some(p) => p.clone(),
        None => args.checkpoint.with_file_name("manifest.json"),
    };
    let manifest = RunManifest::load(&manifest_path)?;
    let cfg = manifest.config;
    let corpus = load_corpus(&cfg)?;
    let (model, state) = checkpoint::load(&args.checkpoint)?;
    let (_, val) = corpus.split_validation(cfg.data.val_fraction);
    let stride = args.stride.unwrap_or(cfg.run.eval_stride);
    let outcome = evaluate_split(&model, &val, stride, cfg.run.eval_batch_size, args.seed)?;
    let summary = serde_json::json!({
        "checkpoint": args.checkpoint,
        "epoch": state.epoch,
        "macro_f1": outcome.f1.macro_f1,
        "per_au_f1": outcome.f1.per_au_f1,
        "support": outcome.f1.support,
        "tpl_accuracy": outcome.tpl_accuracy,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.experiment.resolve()?;
    let corpus = load_corpus(&cfg)?;
    let variants = args.variants.clone().unwrap_or_else(|| Ablation::ALL.to_vec());
    let rows = ablation_table(&cfg, &corpus, &variants)?;
    write_ablation_csv(&rows, open_out(args.out.as_deref())?)
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let base = args.experiment.resolve()?;
    let corpus = load_corpus(&base)?;
    let lens = args.clip_lens.clone().unwrap_or_else(|| vec![base.hyper.clip_len]);
    let mut out = open_out(args.out.as_deref())?;
    for (i, n) in lens.into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.hyper.clip_len = n;
        cfg.model.clip_len = n;
        cfg.validate()?;
        let rows = label_budget_sweep(&cfg, &corpus, &args.ratios, &args.modes)?;
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf)?;
        let text = String::from_utf8_lossy(&buf);
        // One header for the whole table; clip length as an extra leading column.
        for (j, line) in text.lines().enumerate() {
            match (i, j) {
                (_, 0) if i > 0 => continue,
                (_, 0) => writeln!(out, "clip_len,{line}")?,
                _ => writeln!(out, "{n},{line}")?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn coverage(args: &CoverageArgs) -> Result<()> {
    let cfg = args.experiment.resolve()?;
    let corpus = load_corpus(&cfg)?;
    let rows = coverage_table(&corpus, &args.ratios, &args.modes)?;
    write_coverage_csv(&rows, open_out(args.out.as_deref())?)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::TomlDe(_) => EXIT_CONFIG,
        Error::Interrupted => EXIT_INTERRUPTED,
        _ => EXIT_FAILURE,
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match &cli.command {
        Commands::GenData(a) => gen_data(a),
        Commands::Train(a) => train(a),
        Commands::Eval(a) => eval(a),
        Commands::Ablate(a) => ablate(a),
        Commands::Sweep(a) => sweep(a),
        Commands::Coverage(a) => coverage(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("au-spread: {e}");
            exit_code(&e)
        }
    }
}
