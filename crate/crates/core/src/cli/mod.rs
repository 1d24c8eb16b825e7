//! Command-line front end. Every subcommand resolves its flags into a typed
//! argument struct and calls a library function; `run` maps failures to exit
//! codes (1 usage, 2 data, 3 internal).

mod commands;
mod dataset;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use commands::{cmd_eval, cmd_heatmap, cmd_regions, cmd_synth, cmd_train};
pub use dataset::{write_dataset, Dataset, DatasetPaths, GroundTruth, SPLITS_FILE};

use crate::diffcore::{CheckpointError, DiffError};
use crate::embedstore::{EmbedError, ScaleMode};
use crate::evalreport::EvalError;
use crate::milmodels::{Aggregator, ModelError};
use crate::regiongrid::{ManifestError, RegionConfig, RegionError};
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(EmbedError, RegionError, ManifestError, CheckpointError, std::io::Error);

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diff(d) => d.into(),
            ModelError::InvalidConfig(m) => CliError::Usage(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::NonFinite => CliError::Internal(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Eval(m) => m.into(),
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            TrainError::CountMismatch { .. } => CliError::Internal(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nmgrad", version, about = "Nested attention MIL grading pipeline", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Group urothelium tiles into regions.
    Regions(RegionsArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Score a split and write the metric report.
    Eval(EvalArgs),
    /// Export region attention heatmaps.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegionArgs {
    #[arg(long, default_value_t = 8)]
    pub t_lower: usize,
    #[arg(long, default_value_t = 200)]
    pub t_upper: usize,
    #[arg(long, default_value_t = 0)]
    pub kmeans_seed: u64,
    #[arg(long, default_value_t = 100)]
    pub kmeans_max_iters: usize,
}

impl RegionArgs {
    pub fn config(&self) -> RegionConfig {
        RegionConfig {
            t_lower: self.t_lower,
            t_upper: self.t_upper,
            kmeans_seed: self.kmeans_seed,
            kmeans_max_iters: self.kmeans_max_iters,
        }
    }
}

/// Dataset inputs: a directory in the `synth` layout, with individual files
/// overridable.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub embeddings_dir: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// JSON object mapping split names to slide id lists.
    #[arg(long)]
    pub splits: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegionsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub region: RegionArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, env = "NMGRAD_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 220)]
    pub n_train: usize,
    #[arg(long, default_value_t = 30)]
    pub n_val: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
    /// HG fraction applied to every split instead of the default proportions.
    #[arg(long)]
    pub hg_fraction: Option<f64>,
    #[arg(long, default_value_t = 128)]
    pub d_f: usize,
    #[arg(long, default_value_t = 1.5)]
    pub mu_pos: f64,
    #[arg(long, default_value_t = 0.6)]
    pub p_pos: f64,
    /// Region thresholds used to derive the region annotations.
    #[command(flatten)]
    pub region: RegionArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "tri")]
    pub scales: ScaleMode,
    #[arg(long, default_value = "nmia")]
    pub aggregator: Aggregator,
    /// Attention hidden width.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub region: RegionArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
    #[arg(long, default_value_t = 128)]
    pub tiles_per_step: usize,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    #[arg(long, default_value_t = 4.0 / 3.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Seeds parameter initialization, shuffling and tile sampling.
    #[arg(long, env = "NMGRAD_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Suppress per-epoch log lines.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub region: RegionArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// JSON lines of `{"slide_id", "event"}` follow-up outcomes.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub region: RegionArgs,
    /// Slide to export; repeatable.
    #[arg(long = "slide")]
    pub slides: Vec<String>,
    /// Export every slide in the manifest.
    #[arg(long)]
    pub all: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Written as `run_manifest.json` next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Resolved arguments with every default filled in.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub out_dir: String,
    /// Output file names relative to `out_dir`, sorted.
    pub outputs: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
}

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

impl RunManifest {
    pub(crate) fn new(command: &str, config: &impl Serialize, out: &Path) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config).expect("arguments serialize"),
            inputs: BTreeMap::new(),
            out_dir: out.display().to_string(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
        }
    }

    pub(crate) fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    pub(crate) fn write(mut self, out: &Path) -> Result<Self, CliError> {
        self.outputs.push(RUN_MANIFEST_FILE.into());
        self.outputs.sort();
        self.outputs.dedup();
        write_json(&out.join(RUN_MANIFEST_FILE), &self)?;
        Ok(self)
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut body = serde_json::to_vec_pretty(value).expect("value serializes");
    body.push(b'\n');
    fs::write(path, body).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Creates `out`, refusing a non-empty existing directory unless forced.
pub(crate) fn prepare_out(out: &OutArgs) -> Result<(), CliError> {
    if let Ok(mut entries) = fs::read_dir(&out.out) {
        if entries.next().is_some() && !out.force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to write into it",
                out.out.display()
            )));
        }
    } else if out.out.exists() {
        return Err(CliError::Usage(format!("{} is not a directory", out.out.display())));
    }
    fs::create_dir_all(&out.out).map_err(|e| CliError::Data(format!("{}: {e}", out.out.display())))
}

/// Expands `--config <file.json>` into flags placed right after the
/// subcommand, so explicit flags given later take precedence.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = args
        .get(pos + 1)
        .ok_or_else(|| CliError::Usage("--config needs a file path".into()))?
        .clone();
    let mut rest = args.clone();
    rest.drain(pos..pos + 2);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.to_string_lossy())))?;
    let object: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.to_string_lossy())))?;
    let mut flags = Vec::new();
    for (key, value) in object {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            serde_json::Value::Bool(true) => flags.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => {
                flags.push(flag.into());
                flags.push(s.into());
            }
            serde_json::Value::Array(items) => {
                for item in items {
                    flags.push(flag.clone().into());
                    flags.push(json_scalar(&key, &item)?.into());
                }
            }
            other => {
                flags.push(flag.into());
                flags.push(json_scalar(&key, &other)?.into());
            }
        }
    }
    // program name and subcommand come first
    let split = rest.len().min(2);
    let mut out: Vec<OsString> = rest[..split].to_vec();
    out.extend(flags);
    out.extend_from_slice(&rest[split..]);
    Ok(out)
}

fn json_scalar(key: &str, v: &serde_json::Value) -> Result<String, CliError> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::Bool(b) => Ok(b.to_string()),
        _ => Err(CliError::Usage(format!("config key {key:?} must hold a scalar or list of scalars"))),
    }
}

pub fn execute(cli: Cli) -> Result<RunManifest, CliError> {
    match cli.command {
        Command::Regions(a) => cmd_regions(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Heatmap(a) => cmd_heatmap(&a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
