//! Command-line surface tying the pipeline together.
//!
//! Six subcommands cover the working loop:
//!
//! * `synth` — generate a synthetic multivariate time-series corpus with a
//!   ground-truth channel-relevance sidecar.
//! * `train` — preprocess a corpus (derived indexes → gap interpolation →
//!   object-aware split → range scaling fit on the training split →
//!   correlation grouping), build a model, train it, and write the best
//!   checkpoint plus history.
//! * `eval` — score a checkpoint on a dataset and write a metrics report.
//! * `explain` — summarize per-class channel-attention gates of a checkpoint.
//! * `params` — print parameter-count tables for a configuration or the
//!   whole preset grid.
//! * `gradcheck` — verify reverse-mode gradients against central finite
//!   differences, per op and through a full model.
//!
//! Every option lives in a JSON [`RunConfig`]; `--config path` loads one and
//! individual flags override its values. Commands that write artifacts also
//! write a fully resolved `<command>_config.json` snapshot into the output
//! directory, and rerunning with that snapshot reproduces the artifacts
//! byte for byte.
//!
//! Exit codes are a stable contract: `0` success, `2` usage or configuration
//! problems (including malformed inputs), `3` numerical failure (training
//! divergence or a gradient-check breach).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::csv::{read_csv, write_csv};
use crate::data::synth::{generate, SynthSpec};
use crate::data::{
    add_indexes, correlation_groups, interpolate_clouds, split_object_aware, ChannelScaling,
    DataError, PipelineMeta,
};
use crate::eval::{
    attention_csv, evaluate, metrics_csv, AlphaNormalization, AttentionReport, EvalError,
};
use crate::gradcheck::{
    conditioned_toy_batch, model_grad_check, op_cases, toy_multi_config, DEFAULT_STEP, TOLERANCE,
};
use crate::model::{default_grid, grid_config, AttentionMode, Model, ModelConfig, ModelError};
use crate::optim::Algorithm;
use crate::train::{history_csv, train_with_progress, EpochStats, HyperParams, TrainError};

/// Preset used when neither `model` nor `arch` is configured.
pub const DEFAULT_ARCH: &str = "Sdeep-B-Multi-ii";

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

/// A command failure, carrying which exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage, configuration, or input data — exit code 2.
    Config(String),
    /// Numerical failure such as divergence or a gradient mismatch — exit
    /// code 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Numerical(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(context: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{context} {}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Fractions of the object-aware split. Must be non-negative and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

/// Partial training hyperparameters; unset fields resolve to the defaults of
/// [`HyperParams`], except `aux_loss_weight` which defaults to 0.5 for
/// multi-output models and 0 otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub weight_decay: Option<f64>,
    /// Weight of the auxiliary loss term. Setting it above zero requires a
    /// multi-output model: auxiliary supervision only exists alongside the
    /// auxiliary head.
    pub aux_loss_weight: Option<f64>,
    pub algorithm: Option<Algorithm>,
}

impl HyperOverrides {
    /// Resolves against the defaults for a model with attention `mode`.
    pub fn resolve(&self, mode: AttentionMode) -> Result<HyperParams, CliError> {
        let mut hp = HyperParams::default();
        if let Some(v) = self.learning_rate {
            hp.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            hp.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            hp.max_epochs = v;
        }
        if let Some(v) = self.patience {
            hp.patience = v;
        }
        if let Some(v) = self.weight_decay {
            hp.weight_decay = v;
        }
        if let Some(v) = self.algorithm {
            hp.algorithm = v;
        }
        hp.aux_loss_weight = match self.aux_loss_weight {
            Some(w) if w > 0.0 && mode != AttentionMode::Multi => {
                return Err(CliError::Config(format!(
                    "aux_loss_weight {w} requires attention_mode \"multi\"; this model is \
                     \"{}\" and has no auxiliary head to supervise",
                    mode_name(mode)
                )));
            }
            Some(w) => w,
            None if mode == AttentionMode::Multi => hp.aux_loss_weight,
            None => 0.0,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Overrides with every field pinned, for resolved-config snapshots.
    pub fn pinned(hp: &HyperParams) -> Self {
        HyperOverrides {
            learning_rate: Some(hp.learning_rate),
            batch_size: Some(hp.batch_size),
            max_epochs: Some(hp.max_epochs),
            patience: Some(hp.patience),
            weight_decay: Some(hp.weight_decay),
            aux_loss_weight: Some(hp.aux_loss_weight),
            algorithm: Some(hp.algorithm),
        }
    }
}

fn mode_name(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::Single => "single",
        AttentionMode::Multi => "multi",
        AttentionMode::None => "none",
    }
}

/// Work sizes of the `gradcheck` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSpec {
    /// Catalogue rounds: each draws fresh random points for every op.
    pub rounds: usize,
    /// Independent full-model checks, one initialization seed each.
    pub model_seeds: usize,
    /// Instances in the full-model probe batch.
    pub batch: usize,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            rounds: 20,
            model_seeds: 3,
            batch: 3,
        }
    }
}

/// Everything a command run depends on. All fields have defaults; unknown
/// keys in a config file are hard errors. Flags override file values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Input dataset CSV.
    pub data: Option<PathBuf>,
    /// Channel-name sidecar JSON. Defaults to a `meta.json` next to `data`
    /// when one exists.
    pub meta: Option<PathBuf>,
    /// Output directory for artifacts.
    pub out: PathBuf,
    /// Seed for splitting, initialization, and training.
    pub seed: u64,
    /// Preset architecture name; see `params` for the list.
    pub arch: Option<String>,
    /// Explicit model configuration; takes precedence over `arch`.
    pub model: Option<ModelConfig>,
    pub hyper: HyperOverrides,
    pub split: SplitSpec,
    /// Append derived index channels before interpolation (requires source
    /// channel names in the sidecar).
    pub add_indexes: bool,
    /// |r| at or above which channels land in one correlation group.
    pub correlation_threshold: f64,
    pub synth: SynthSpec,
    /// Checkpoint path for `eval` and `explain`.
    pub checkpoint: Option<PathBuf>,
    /// Gate normalization used by `explain` reports.
    pub normalization: AlphaNormalization,
    /// Prediction batch size for `eval` and `explain`.
    pub eval_batch_size: usize,
    pub gradcheck: GradcheckSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            meta: None,
            out: PathBuf::from("out"),
            seed: 0,
            arch: None,
            model: None,
            hyper: HyperOverrides::default(),
            split: SplitSpec::default(),
            add_indexes: false,
            correlation_threshold: 0.6,
            synth: SynthSpec::default(),
            checkpoint: None,
            normalization: AlphaNormalization::PerPixel,
            eval_batch_size: 256,
            gradcheck: GradcheckSpec::default(),
        }
    }
}

impl RunConfig {
    /// Loads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| io_err("cannot read config", path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }
}

/// Sidecar written next to a generated corpus: channel names plus the
/// ground-truth relevance map used to validate attention reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub channel_names: Vec<String>,
    /// Per class: channels whose prototypes differ from the nearest class.
    pub relevant_channels: std::collections::BTreeMap<usize, Vec<usize>>,
    pub seed: u64,
    pub spec: SynthSpec,
}

// ---------------------------------------------------------------------------
// Argument declarations
// ---------------------------------------------------------------------------

/// Channel-attention time-series classifiers: data synthesis, training,
/// evaluation, attention reports, and gradient verification.
#[derive(Debug, Parser)]
#[command(name = "sdeep", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled corpus with known channel relevance.
    Synth(SynthArgs),
    /// Preprocess a corpus, train a model, write checkpoint + history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a metrics report.
    Eval(EvalArgs),
    /// Report per-class channel-attention statistics of a checkpoint.
    Explain(ExplainArgs),
    /// Print parameter counts for a configuration or the preset grid.
    Params(ParamsArgs),
    /// Verify gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (corpus.csv, meta.json, synth_config.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub num_timesteps: Option<usize>,
    #[arg(long)]
    pub objects_per_class: Option<usize>,
    #[arg(long)]
    pub pixels_per_object: Option<usize>,
    /// Probability that a (pixel, timestep) is cloud-masked.
    #[arg(long)]
    pub cloud_fraction: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub object_offset_sd: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input corpus CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Channel-name sidecar JSON (default: meta.json next to the data).
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Output directory (train_config.json, split_summary.json, test.csv,
    /// history.csv, model.ckpt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Preset architecture name; see `params` for the list.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Auxiliary loss weight (multi-output models only).
    #[arg(long)]
    pub aux_loss_weight: Option<f64>,
    /// Optimizer: "adam" or "adagrad".
    #[arg(long)]
    pub algorithm: Option<String>,
    /// Append derived index channels before interpolation: true/false.
    #[arg(long)]
    pub add_indexes: Option<bool>,
    #[arg(long)]
    pub correlation_threshold: Option<f64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset CSV to score (raw; the checkpoint's preprocessing is applied).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (metrics.csv, eval_config.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset CSV to gate (raw; the checkpoint's preprocessing is applied).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (attention.csv, explain_config.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Gate normalization: "per_pixel" or "class_mean_total".
    #[arg(long)]
    pub normalization: Option<String>,
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// JSON run-config file holding an explicit `model` to count.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Count a single preset instead of the whole grid.
    #[arg(long)]
    pub arch: Option<String>,
    /// Optional output directory (params.csv, params_config.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Catalogue rounds (fresh random points per op each round).
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Independent full-model checks.
    #[arg(long)]
    pub model_seeds: Option<usize>,
    /// Optional output directory (gradcheck.csv, gradcheck_config.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Parses `std::env::args` and runs the chosen command.
pub fn run() -> Result<(), CliError> {
    dispatch(Cli::parse())
}

/// Runs an already-parsed invocation.
pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Params(args) => cmd_params(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err("cannot write", path, e))
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err("cannot create output directory", dir, e))
}

fn json_pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("artifact structs serialize");
    text.push('\n');
    text
}

fn write_snapshot(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    write_file(&dir.join(format!("{command}_config.json")), json_pretty(cfg).as_bytes())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.num_classes {
        cfg.synth.num_classes = v;
    }
    if let Some(v) = args.num_timesteps {
        cfg.synth.num_timesteps = v;
    }
    if let Some(v) = args.objects_per_class {
        cfg.synth.objects_per_class = v;
    }
    if let Some(v) = args.pixels_per_object {
        cfg.synth.pixels_per_object = v;
    }
    if let Some(v) = args.cloud_fraction {
        cfg.synth.cloud_fraction = v;
    }
    if let Some(v) = args.noise_sd {
        cfg.synth.noise_sd = v;
    }
    if let Some(v) = args.object_offset_sd {
        cfg.synth.object_offset_sd = v;
    }

    let output = generate(&cfg.synth, cfg.seed)?;
    ensure_out_dir(&cfg.out)?;
    write_snapshot(&cfg.out, "synth", &cfg)?;
    write_file(&cfg.out.join("corpus.csv"), write_csv(&output.dataset).as_bytes())?;
    let meta = CorpusMeta {
        channel_names: output.dataset.channel_names.clone(),
        relevant_channels: output.relevant_channels.clone(),
        seed: cfg.seed,
        spec: cfg.synth.clone(),
    };
    write_file(&cfg.out.join("meta.json"), json_pretty(&meta).as_bytes())?;

    println!(
        "wrote {} pixels ({} classes x {} channels x {} timesteps) to {}",
        output.dataset.len(),
        cfg.synth.num_classes,
        output.dataset.num_channels(),
        cfg.synth.num_timesteps,
        cfg.out.join("corpus.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.data {
        cfg.data = Some(v);
    }
    if let Some(v) = args.meta {
        cfg.meta = Some(v);
    }
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.arch {
        cfg.arch = Some(v);
    }
    if let Some(v) = args.learning_rate {
        cfg.hyper.learning_rate = Some(v);
    }
    if let Some(v) = args.batch_size {
        cfg.hyper.batch_size = Some(v);
    }
    if let Some(v) = args.max_epochs {
        cfg.hyper.max_epochs = Some(v);
    }
    if let Some(v) = args.patience {
        cfg.hyper.patience = Some(v);
    }
    if let Some(v) = args.weight_decay {
        cfg.hyper.weight_decay = Some(v);
    }
    if let Some(v) = args.aux_loss_weight {
        cfg.hyper.aux_loss_weight = Some(v);
    }
    if let Some(v) = args.algorithm {
        cfg.hyper.algorithm = Some(parse_keyword(&v, "algorithm")?);
    }
    if let Some(v) = args.add_indexes {
        cfg.add_indexes = v;
    }
    if let Some(v) = args.correlation_threshold {
        cfg.correlation_threshold = v;
    }
    if let Some(v) = args.train_frac {
        cfg.split.train = v;
    }
    if let Some(v) = args.val_frac {
        cfg.split.val = v;
    }
    if let Some(v) = args.test_frac {
        cfg.split.test = v;
    }

    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Config("train needs --data or a config with `data`".into()))?;
    let text =
        fs::read_to_string(&data_path).map_err(|e| io_err("cannot read dataset", &data_path, e))?;
    let mut raw = read_csv(&text)?;

    // Channel names travel in a sidecar; the CSV header only numbers them.
    let meta_path = cfg.meta.clone().or_else(|| {
        let sibling = data_path.parent().map(|d| d.join("meta.json"))?;
        sibling.exists().then_some(sibling)
    });
    if let Some(ref mp) = meta_path {
        let names = read_sidecar_names(mp)?;
        if names.len() != raw.num_channels() {
            return Err(CliError::Config(format!(
                "sidecar {} names {} channels, dataset has {}",
                mp.display(),
                names.len(),
                raw.num_channels()
            )));
        }
        raw.channel_names = names;
        println!("channel names from {}", mp.display());
    }
    cfg.meta = meta_path;

    // Preprocess: derived indexes on raw values, then gap interpolation.
    let with_indexes = if cfg.add_indexes { add_indexes(&raw)? } else { raw.clone() };
    let filled = interpolate_clouds(&with_indexes)?;

    // Object-aware split, then range scaling fit on the training split only.
    let (train_filled, val_filled, test_filled, summary) =
        split_object_aware(&filled, cfg.split.fractions(), cfg.seed)?;
    for warning in &summary.warnings {
        println!("warning: {warning}");
    }
    let scaling = ChannelScaling::fit(&train_filled)?;
    let train_scaled = scaling.apply(&train_filled)?;
    let val_scaled = scaling.apply(&val_filled)?;

    // Correlated channel groups, measured on the scaled training split.
    let groups = correlation_groups(&train_scaled, cfg.correlation_threshold);
    println!(
        "channel groups at |r| >= {}: {:?}",
        cfg.correlation_threshold, groups
    );

    let num_classes = filled.num_classes();
    if cfg.model.is_none() && cfg.arch.is_none() {
        cfg.arch = Some(DEFAULT_ARCH.to_string());
    }
    let model_cfg = resolve_model(
        &cfg,
        train_scaled.num_channels(),
        train_scaled.num_timesteps,
        num_classes,
        groups.clone(),
    )?;
    model_cfg.validate()?;
    let hp = cfg.hyper.resolve(model_cfg.attention_mode)?;

    let pipeline = PipelineMeta {
        channel_names: train_scaled.channel_names.clone(),
        add_indexes: cfg.add_indexes,
        scaling,
        channel_groups: groups,
    };

    // Snapshot with everything pinned, written before the long run.
    ensure_out_dir(&cfg.out)?;
    let mut resolved = cfg.clone();
    resolved.model = Some(model_cfg.clone());
    resolved.hyper = HyperOverrides::pinned(&hp);
    write_snapshot(&cfg.out, "train", &resolved)?;
    write_file(&cfg.out.join("split_summary.json"), json_pretty(&summary).as_bytes())?;

    // Raw rows of the held-out split, so evaluation re-applies the recorded
    // preprocessing from scratch.
    let test_ids: BTreeSet<u64> = test_filled.pixels.iter().map(|p| p.pixel_id).collect();
    let test_raw_indices: Vec<usize> = raw
        .pixels
        .iter()
        .enumerate()
        .filter(|(_, p)| test_ids.contains(&p.pixel_id))
        .map(|(i, _)| i)
        .collect();
    let test_raw = raw.select(&test_raw_indices);
    write_file(&cfg.out.join("test.csv"), write_csv(&test_raw).as_bytes())?;

    let train_set = train_scaled.to_labeled_set()?;
    let val_set = val_scaled.to_labeled_set()?;
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    println!(
        "training {} ({} parameters) on {} pixels, validating on {}",
        if cfg.model.is_some() { "custom model" } else { cfg.arch.as_deref().unwrap_or(DEFAULT_ARCH) },
        Model::count_params(&model_cfg)?.total,
        train_set.len(),
        val_set.len()
    );

    let started = Instant::now();
    let mut on_epoch = |s: &EpochStats| {
        println!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}",
            s.epoch, s.train_loss, s.val_loss, s.val_accuracy
        );
        let _ = std::io::stdout().flush();
    };
    let outcome = train_with_progress(model, &train_set, &val_set, &hp, cfg.seed, Some(&mut on_epoch))?;

    write_file(&cfg.out.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
    let checkpoint = Checkpoint::from_outcome(&outcome, pipeline.to_value());
    checkpoint.save(&cfg.out.join("model.ckpt"))?;
    println!(
        "best epoch {} (val_loss {:.6}) after {:.1}s; wrote {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        started.elapsed().as_secs_f64(),
        cfg.out.join("model.ckpt").display()
    );
    Ok(())
}

/// Reads `channel_names` from a corpus sidecar, tolerating extra keys.
fn read_sidecar_names(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err("cannot read sidecar", path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("sidecar {}: {e}", path.display())))?;
    let names = value
        .get("channel_names")
        .and_then(|v| v.as_array())
        .ok_or_else(|| {
            CliError::Config(format!(
                "sidecar {} has no `channel_names` array",
                path.display()
            ))
        })?;
    names
        .iter()
        .map(|v| {
            v.as_str().map(str::to_owned).ok_or_else(|| {
                CliError::Config(format!(
                    "sidecar {}: channel_names must be strings",
                    path.display()
                ))
            })
        })
        .collect()
}

fn resolve_model(
    cfg: &RunConfig,
    num_channels: usize,
    num_timesteps: usize,
    num_classes: usize,
    groups: Vec<Vec<usize>>,
) -> Result<ModelConfig, CliError> {
    if let Some(model) = &cfg.model {
        if model.num_channels != num_channels || model.num_timesteps != num_timesteps {
            return Err(CliError::Config(format!(
                "model expects {} channels x {} timesteps, dataset provides {} x {}",
                model.num_channels, model.num_timesteps, num_channels, num_timesteps
            )));
        }
        if model.num_classes < num_classes {
            return Err(CliError::Config(format!(
                "model declares {} classes but dataset labels reach {}",
                model.num_classes,
                num_classes - 1
            )));
        }
        return Ok(model.clone());
    }
    let name = cfg.arch.as_deref().unwrap_or(DEFAULT_ARCH);
    grid_config(name, num_channels, num_timesteps, num_classes, groups).ok_or_else(|| {
        let known: Vec<String> = default_grid().into_iter().map(|(n, _)| n).collect();
        CliError::Config(format!(
            "unknown preset `{name}`; available: {}",
            known.join(", ")
        ))
    })
}

/// Parses a lowercase keyword the same way config files do.
fn parse_keyword<T: serde::de::DeserializeOwned>(word: &str, what: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(word.to_string()))
        .map_err(|e| CliError::Config(format!("{what} `{word}`: {e}")))
}

// ---------------------------------------------------------------------------
// eval / explain
// ---------------------------------------------------------------------------

struct ScoredRun {
    model: Model,
    pipeline: PipelineMeta,
    labels: Vec<usize>,
    report: crate::eval::MetricsReport,
    alphas: Option<Vec<f64>>,
}

/// Loads a checkpoint, re-applies its recorded preprocessing to a raw
/// dataset, and scores it.
fn score_checkpoint(
    checkpoint: &Path,
    data: &Path,
    batch_size: usize,
) -> Result<ScoredRun, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let pipeline = PipelineMeta::from_value(&ckpt.pipeline)?;
    let text = fs::read_to_string(data).map_err(|e| io_err("cannot read dataset", data, e))?;
    let raw = read_csv(&text)?;
    let processed = pipeline.preprocess(&raw)?;
    let set = processed.to_labeled_set()?;
    let (report, alphas) = evaluate(&model, &set, batch_size)?;
    Ok(ScoredRun {
        model,
        pipeline,
        labels: set.labels,
        report,
        alphas,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = args.data {
        cfg.data = Some(v);
    }
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if let Some(v) = args.eval_batch_size {
        cfg.eval_batch_size = v;
    }
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("eval needs --checkpoint".into()))?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Config("eval needs --data".into()))?;

    let run = score_checkpoint(&checkpoint, &data, cfg.eval_batch_size)?;
    ensure_out_dir(&cfg.out)?;
    write_snapshot(&cfg.out, "eval", &cfg)?;
    write_file(
        &cfg.out.join("metrics.csv"),
        metrics_csv(&run.report.to_rows()).as_bytes(),
    )?;

    println!(
        "accuracy {:.4} | macro_f1 {:.4} | {} pixels | wrote {}",
        run.report.accuracy,
        run.report.macro_f1,
        run.labels.len(),
        cfg.out.join("metrics.csv").display()
    );
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = args.data {
        cfg.data = Some(v);
    }
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if let Some(v) = args.normalization {
        cfg.normalization = parse_keyword(&v, "normalization")?;
    }
    if let Some(v) = args.eval_batch_size {
        cfg.eval_batch_size = v;
    }
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("explain needs --checkpoint".into()))?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Config("explain needs --data".into()))?;

    let run = score_checkpoint(&checkpoint, &data, cfg.eval_batch_size)?;
    let Some(alphas) = run.alphas else {
        return Err(CliError::Config(
            "this checkpoint has no attention gates to report (attention_mode \"none\")".into(),
        ));
    };
    let report = AttentionReport::new(
        &alphas,
        &run.labels,
        run.model.config().num_classes,
        &run.pipeline.channel_names,
        cfg.normalization,
    )?;

    ensure_out_dir(&cfg.out)?;
    write_snapshot(&cfg.out, "explain", &cfg)?;
    write_file(
        &cfg.out.join("attention.csv"),
        attention_csv(&report.to_rows()).as_bytes(),
    )?;

    for class_stats in &report.per_class {
        if let Some(top) = report.top_channel(class_stats.class) {
            let name = &run.pipeline.channel_names[top];
            println!(
                "class {}: top median attention on channel {} ({}), {} pixels",
                class_stats.class, top, name, class_stats.pixels
            );
        }
    }
    println!("wrote {}", cfg.out.join("attention.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

fn cmd_params(args: ParamsArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let entries: Vec<(String, ModelConfig)> = if let Some(model) = cfg.model.clone() {
        vec![("custom".to_string(), model)]
    } else if let Some(name) = args.arch.or(cfg.arch.clone()) {
        let found = default_grid().into_iter().find(|(n, _)| *n == name);
        match found {
            Some(entry) => vec![entry],
            None => {
                let known: Vec<String> = default_grid().into_iter().map(|(n, _)| n).collect();
                return Err(CliError::Config(format!(
                    "unknown preset `{name}`; available: {}",
                    known.join(", ")
                )));
            }
        }
    } else {
        default_grid()
    };

    let mut lines = Vec::new();
    lines.push(format!(
        "{:<22} {:>10} {:>10} {:>10} {:>10}",
        "name", "conv", "attention", "heads", "total"
    ));
    let mut csv = String::from("name,conv,attention,heads,total\n");
    for (name, model_cfg) in &entries {
        let count = Model::count_params(model_cfg)?;
        lines.push(format!(
            "{:<22} {:>10} {:>10} {:>10} {:>10}",
            name, count.conv, count.attention, count.heads, count.total
        ));
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            name, count.conv, count.attention, count.heads, count.total
        ));
    }
    for line in &lines {
        println!("{line}");
    }

    if let Some(out) = args.out {
        ensure_out_dir(&out)?;
        let mut resolved = cfg;
        resolved.out = out.clone();
        write_snapshot(&out, "params", &resolved)?;
        write_file(&out.join("params.csv"), csv.as_bytes())?;
        println!("wrote {}", out.join("params.csv").display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.rounds {
        cfg.gradcheck.rounds = v;
    }
    if let Some(v) = args.model_seeds {
        cfg.gradcheck.model_seeds = v;
    }

    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut rows: Vec<(String, f64)> = Vec::new();
    let mut op_worst: std::collections::BTreeMap<&'static str, f64> =
        std::collections::BTreeMap::new();
    let mut op_order: Vec<&'static str> = Vec::new();
    for _ in 0..cfg.gradcheck.rounds {
        for case in op_cases(&mut rng) {
            let err = case
                .check()
                .map_err(|e| CliError::Config(format!("case {}: {e}", case.name)))?;
            if !op_worst.contains_key(case.name) {
                op_order.push(case.name);
            }
            let worst = op_worst.entry(case.name).or_insert(0.0);
            *worst = worst.max(err);
        }
    }
    for name in op_order {
        rows.push((name.to_string(), op_worst[name]));
    }

    let config = toy_multi_config();
    for seed in 0..cfg.gradcheck.model_seeds as u64 {
        let model = Model::new(config.clone(), cfg.seed.wrapping_add(seed))?;
        let (x, labels) = conditioned_toy_batch(&model, cfg.gradcheck.batch, &mut rng)?;
        let report = model_grad_check(&model, &x, &labels, 0.5, DEFAULT_STEP)?;
        let (worst_name, _) = report.worst_param();
        rows.push((format!("model seed {seed} (worst: {worst_name})"), report.worst));
    }

    println!("{:<42} {:>12}", "check", "max_error");
    let mut csv = String::from("check,max_error\n");
    let mut worst = 0.0f64;
    for (name, err) in &rows {
        println!("{name:<42} {err:>12.3e}");
        csv.push_str(&format!("{name},{err:.3e}\n"));
        worst = worst.max(*err);
    }
    println!(
        "worst {worst:.3e} against tolerance {TOLERANCE:.0e} in {:.1}s",
        started.elapsed().as_secs_f64()
    );

    if let Some(out) = args.out {
        ensure_out_dir(&out)?;
        let mut resolved = cfg.clone();
        resolved.out = out.clone();
        write_snapshot(&out, "gradcheck", &resolved)?;
        write_file(&out.join("gradcheck.csv"), csv.as_bytes())?;
    }

    if worst > TOLERANCE {
        return Err(CliError::Numerical(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds {TOLERANCE:.0e}"
        )));
    }
    println!("PASS");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_defaults_are_complete_and_reparseable() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.out, PathBuf::from("out"));
        assert_eq!(cfg.correlation_threshold, 0.6);
        assert_eq!(cfg.split.fractions(), (0.6, 0.2, 0.2));
        assert_eq!(cfg.eval_batch_size, 256);
        // the snapshot of the defaults parses back identically
        let text = json_pretty(&cfg);
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.split, cfg.split);
        assert_eq!(back.synth, cfg.synth);
        assert_eq!(back.hyper, cfg.hyper);
    }

    #[test]
    fn unknown_config_keys_are_hard_errors() {
        let err = serde_json::from_str::<RunConfig>("{\"learning_rate\": 0.1}").unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let err =
            serde_json::from_str::<RunConfig>("{\"hyper\": {\"lr\": 0.1}}").unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn aux_weight_requires_a_multi_output_model() {
        let overrides = HyperOverrides {
            aux_loss_weight: Some(0.5),
            ..HyperOverrides::default()
        };
        let err = overrides.resolve(AttentionMode::None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("aux_loss_weight"));
        // explicit zero is fine anywhere
        let overrides = HyperOverrides {
            aux_loss_weight: Some(0.0),
            ..HyperOverrides::default()
        };
        assert_eq!(overrides.resolve(AttentionMode::None).unwrap().aux_loss_weight, 0.0);
    }

    #[test]
    fn aux_weight_defaults_by_attention_mode() {
        let overrides = HyperOverrides::default();
        assert_eq!(overrides.resolve(AttentionMode::Multi).unwrap().aux_loss_weight, 0.5);
        assert_eq!(overrides.resolve(AttentionMode::Single).unwrap().aux_loss_weight, 0.0);
        assert_eq!(overrides.resolve(AttentionMode::None).unwrap().aux_loss_weight, 0.0);
    }

    #[test]
    fn pinned_overrides_resolve_to_the_same_hyperparameters() {
        let hp = HyperParams::default();
        let pinned = HyperOverrides::pinned(&hp);
        let back = pinned.resolve(AttentionMode::Multi).unwrap();
        assert_eq!(back, hp);
    }

    #[test]
    fn resolve_model_rejects_dimension_mismatches() {
        let mut cfg = RunConfig::default();
        cfg.model = Some(toy_multi_config());
        let groups = vec![vec![0, 1], vec![2, 3]];
        // channels differ
        let err = resolve_model(&cfg, 6, 12, 3, groups.clone()).unwrap_err();
        assert!(err.to_string().contains("channels"));
        // too many classes in the data
        let err = resolve_model(&cfg, 4, 12, 5, groups.clone()).unwrap_err();
        assert!(err.to_string().contains("classes"));
        // exact match passes
        let ok = resolve_model(&cfg, 4, 12, 3, groups).unwrap();
        assert_eq!(ok.num_classes, 3);
    }

    #[test]
    fn unknown_presets_list_the_catalogue() {
        let mut cfg = RunConfig::default();
        cfg.arch = Some("Sdeep-Z-Mega-iv".into());
        let err = resolve_model(&cfg, 6, 21, 11, vec![]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Sdeep-Z-Mega-iv"));
        assert!(msg.contains(DEFAULT_ARCH));
    }

    #[test]
    fn keyword_parsing_matches_config_file_spelling() {
        let alg: Algorithm = parse_keyword("adagrad", "algorithm").unwrap();
        assert_eq!(alg, Algorithm::Adagrad);
        let norm: AlphaNormalization =
            parse_keyword("class_mean_total", "normalization").unwrap();
        assert_eq!(norm, AlphaNormalization::ClassMeanTotal);
        assert!(parse_keyword::<Algorithm>("sgd", "algorithm").is_err());
    }

    #[test]
    fn cli_declaration_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
