//! Configuration: CLI flags, config files, defaults, and provenance.
//!
//! Every run resolves its settings from three layers — built-in defaults,
//! an optional YAML/JSON config file, and command-line flags — with flags
//! winning over the file and the file over defaults. The resolution records
//! where each value came from, and that provenance map lands in the run
//! manifest, so an artifact can always be traced back to the exact knobs
//! (and their sources) that produced it.
//!
//! Perturbation budgets accept fraction syntax (`--epsilon 12/255`) so
//! pixel-range units can be written down exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fewshot_core::attacks::{AttackConfig, AttackKind};
use fewshot_core::filters::{FilterKind, LossVariant};
use fewshot_core::models::HeadKind;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, LabError, Result};

/// Environment variable consulted for the output root when neither the
/// `--output-root` flag nor the config file provides one.
pub const OUTPUT_ROOT_ENV: &str = "FEWSHOT_OUTPUT_ROOT";

const DEFAULT_OUTPUT_ROOT: &str = "fewshot-out";

// ---------------------------------------------------------------------------
// Fraction parsing
// ---------------------------------------------------------------------------

/// Parses `"12/255"` or a plain float. Fractions keep paper-style pixel
/// budgets exact instead of forcing a rounded decimal.
pub fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num: f64 = num.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?;
        let den: f64 = den.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?;
        if den == 0.0 {
            return Err(format!("zero denominator in `{s}`"));
        }
        Ok(num / den)
    } else {
        s.parse().map_err(|_| format!("`{s}` is neither a number nor a fraction"))
    }
}

/// A float that may be written as a fraction string in config files.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Fraction {
    Number(f64),
    Text(String),
}

impl Fraction {
    fn resolve(&self, key: &str) -> Result<f64> {
        match self {
            Fraction::Number(v) => Ok(*v),
            Fraction::Text(s) => parse_fraction(s).map_err(|e| LabError::config(key, e)),
        }
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

/// Experiment harness for few-shot support-set attacks and their detection.
#[derive(Debug, Parser)]
#[command(name = "fewshot", version, about)]
pub struct Cli {
    /// YAML or JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory run directories are created under.
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,

    /// Global seed, used by the subcommand when its own seed is not given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset (synthetic by default, or from an image folder).
    GenData(GenDataArgs),
    /// Train a few-shot classifier episodically.
    TrainModel(TrainModelArgs),
    /// Train the feature-preserving autoencoder filter.
    TrainAe(TrainAeArgs),
    /// Craft adversarial support perturbations against a trained model.
    Attack(AttackArgs),
    /// Score clean and attacked support sets with detection statistics.
    Detect(DetectArgs),
    /// Aggregate artifacts into result tables (accuracy, ASR, AUROC).
    Evaluate(EvaluateArgs),
    /// Render figures from result tables.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainModel(_) => "train-model",
            Command::TrainAe(_) => "train-ae",
            Command::Attack(_) => "attack",
            Command::Detect(_) => "detect",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Strength of the class template relative to mid-gray.
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// How many classes go to the train split (val/test take the rest).
    #[arg(long)]
    pub train_classes: Option<usize>,
    #[arg(long)]
    pub val_classes: Option<usize>,
    #[arg(long)]
    pub test_classes: Option<usize>,
    /// Load real images from root/<class>/<file>.png|jpg instead.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// JSON file mapping train/val/test to class-name lists.
    #[arg(long)]
    pub split_spec: Option<PathBuf>,
    /// Resize folder images to this height,width (e.g. 16,16).
    #[arg(long, num_args = 2, value_delimiter = ',')]
    pub resize: Option<Vec<usize>>,
    #[arg(long = "data-seed")]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct TrainModelArgs {
    /// Training-split dataset archive.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Validation-split dataset archive.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Similarity head: relation | can.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub relation_hidden: Option<usize>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries_total: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub val_episodes: Option<usize>,
    #[arg(long = "train-seed")]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct TrainAeArgs {
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Classifier checkpoint the preservation loss trains against.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Loss variant: fpa | fpa-prime | standard.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs_standard: Option<usize>,
    #[arg(long)]
    pub epochs_finetune: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lr_step_epochs: Option<usize>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub reference_ways: Option<usize>,
    #[arg(long)]
    pub reference_shots: Option<usize>,
    /// Train with flips, mixing, jitter, and a denoising objective.
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub denoise_max_std: Option<f64>,
    #[arg(long = "ae-seed")]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset archive the attacks draw supports and episodes from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Attack kind: pgd | cw-sgd.
    #[arg(long)]
    pub kind: Option<String>,
    /// Perturbation budget; accepts fractions like 12/255.
    #[arg(long, value_parser = parse_fraction, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    /// Step size; accepts fractions like 12/255.
    #[arg(long, value_parser = parse_fraction, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// CW hinge slack.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// CW margin weight against the delta norm.
    #[arg(long)]
    pub const_weight: Option<f64>,
    /// Target classes (default: every class in the dataset).
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    /// Independent perturbation sets crafted per class.
    #[arg(long)]
    pub sets_per_class: Option<usize>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries_per_episode: Option<usize>,
    #[arg(long = "attack-seed")]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of perturbation-record archives.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Autoencoder checkpoints backing the fpa / fpa_prime filters.
    #[arg(long, value_delimiter = ',')]
    pub autoencoders: Option<Vec<PathBuf>>,
    /// Filters to score with: identity | noise | median_2x2 | fpa | fpa_prime.
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<String>>,
    /// Clean support sets drawn per class (default: as many as attacked).
    #[arg(long)]
    pub clean_sets_per_class: Option<usize>,
    /// Expected SHA-256 of the model checkpoint; mismatch aborts.
    #[arg(long)]
    pub model_sha256: Option<String>,
    /// Expected SHA-256 of the dataset archive; mismatch aborts.
    #[arg(long)]
    pub data_sha256: Option<String>,
    #[arg(long = "detect-seed")]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of perturbation records (enables ASR tables).
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Detection-score CSV (enables AUROC tables).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub n_eval_episodes: Option<usize>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries_total: Option<usize>,
    #[arg(long)]
    pub model_sha256: Option<String>,
    #[arg(long)]
    pub data_sha256: Option<String>,
    #[arg(long = "eval-seed")]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct ReportArgs {
    /// Tables directory produced by `evaluate`.
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub output_root: Option<PathBuf>,
    pub seed: Option<u64>,
    pub gen_data: Option<GenDataFile>,
    pub train_model: Option<TrainModelFile>,
    pub train_ae: Option<TrainAeFile>,
    pub attack: Option<AttackFile>,
    pub detect: Option<DetectFile>,
    pub evaluate: Option<EvaluateFile>,
    pub report: Option<ReportFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataFile {
    pub n_classes: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub channels: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub signal: Option<f64>,
    pub noise_std: Option<f64>,
    pub train_classes: Option<usize>,
    pub val_classes: Option<usize>,
    pub test_classes: Option<usize>,
    pub image_root: Option<PathBuf>,
    pub split_spec: Option<PathBuf>,
    pub resize: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainModelFile {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub head: Option<String>,
    pub base_channels: Option<usize>,
    pub relation_hidden: Option<usize>,
    pub init_seed: Option<u64>,
    pub epochs: Option<usize>,
    pub episodes_per_epoch: Option<usize>,
    pub ways: Option<usize>,
    pub shots: Option<usize>,
    pub queries_total: Option<usize>,
    pub learning_rate: Option<f64>,
    pub val_episodes: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainAeFile {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub variant: Option<String>,
    pub epochs_standard: Option<usize>,
    pub epochs_finetune: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_step_epochs: Option<usize>,
    pub lr_gamma: Option<f64>,
    pub batch_size: Option<usize>,
    pub reference_ways: Option<usize>,
    pub reference_shots: Option<usize>,
    pub augment: Option<bool>,
    pub denoise_max_std: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackFile {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub kind: Option<String>,
    pub epsilon: Option<Fraction>,
    pub eta: Option<Fraction>,
    pub iterations: Option<usize>,
    pub kappa: Option<f64>,
    pub const_weight: Option<f64>,
    pub targets: Option<Vec<String>>,
    pub sets_per_class: Option<usize>,
    pub ways: Option<usize>,
    pub shots: Option<usize>,
    pub queries_per_episode: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectFile {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub autoencoders: Option<Vec<PathBuf>>,
    pub filters: Option<Vec<String>>,
    pub clean_sets_per_class: Option<usize>,
    pub model_sha256: Option<String>,
    pub data_sha256: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateFile {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub n_eval_episodes: Option<usize>,
    pub ways: Option<usize>,
    pub shots: Option<usize>,
    pub queries_total: Option<usize>,
    pub model_sha256: Option<String>,
    pub data_sha256: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub tables: Option<PathBuf>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).at(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext.to_ascii_lowercase().as_str() {
        "json" => serde_json::from_str(&text)
            .map_err(|e| LabError::format(path, format!("malformed JSON config: {e}"))),
        "yaml" | "yml" => serde_yaml::from_str(&text)
            .map_err(|e| LabError::format(path, format!("malformed YAML config: {e}"))),
        other => Err(LabError::format(
            path,
            format!("unsupported config extension `{other}` (expected json, yaml, or yml)"),
        )),
    }
}

// ---------------------------------------------------------------------------
// Resolved configs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GenDataConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub signal: f64,
    pub noise_std: f64,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub image_root: Option<PathBuf>,
    pub split_spec: Option<PathBuf>,
    pub resize: Option<(usize, usize)>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainModelConfig {
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub head: HeadKind,
    pub base_channels: usize,
    pub relation_hidden: usize,
    pub init_seed: u64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries_total: usize,
    pub learning_rate: f64,
    pub val_episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainAeConfig {
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub model: Option<PathBuf>,
    pub variant: LossVariant,
    pub epochs_standard: usize,
    pub epochs_finetune: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub batch_size: usize,
    pub reference_ways: usize,
    pub reference_shots: usize,
    pub augment: bool,
    pub denoise_max_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackCmdConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub kind: AttackKind,
    pub epsilon: f64,
    pub eta: f64,
    pub iterations: usize,
    pub kappa: f64,
    pub const_weight: f64,
    pub targets: Vec<String>,
    pub sets_per_class: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_episode: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub records: PathBuf,
    pub autoencoders: Vec<PathBuf>,
    /// Empty means "identity, noise, median, plus every loaded autoencoder".
    pub filters: Vec<FilterKind>,
    pub clean_sets_per_class: Option<usize>,
    pub model_sha256: Option<String>,
    pub data_sha256: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub records: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub n_eval_episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries_total: usize,
    pub model_sha256: Option<String>,
    pub data_sha256: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportConfig {
    pub tables: PathBuf,
}

/// A fully resolved command, ready to execute.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum CommandConfig {
    GenData(GenDataConfig),
    TrainModel(TrainModelConfig),
    TrainAe(TrainAeConfig),
    Attack(AttackCmdConfig),
    Detect(DetectConfig),
    Evaluate(EvaluateConfig),
    Report(ReportConfig),
}

impl CommandConfig {
    pub fn name(&self) -> &'static str {
        match self {
            CommandConfig::GenData(_) => "gen-data",
            CommandConfig::TrainModel(_) => "train-model",
            CommandConfig::TrainAe(_) => "train-ae",
            CommandConfig::Attack(_) => "attack",
            CommandConfig::Detect(_) => "detect",
            CommandConfig::Evaluate(_) => "evaluate",
            CommandConfig::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub command: CommandConfig,
    pub output_root: PathBuf,
    /// Dotted key → "flag" | "file" | "env" | "default".
    pub provenance: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

struct Scope<'a> {
    section: &'static str,
    prov: &'a mut BTreeMap<String, String>,
}

impl Scope<'_> {
    fn pick<T>(&mut self, key: &str, flag: Option<T>, file: Option<T>, default: T) -> T {
        let (value, source) = match (flag, file) {
            (Some(v), _) => (v, "flag"),
            (None, Some(v)) => (v, "file"),
            (None, None) => (default, "default"),
        };
        self.prov.insert(format!("{}.{key}", self.section), source.to_string());
        value
    }

    fn optional<T>(&mut self, key: &str, flag: Option<T>, file: Option<T>) -> Option<T> {
        let (value, source) = match (flag, file) {
            (Some(v), _) => (Some(v), "flag"),
            (None, Some(v)) => (Some(v), "file"),
            (None, None) => (None, "default"),
        };
        self.prov.insert(format!("{}.{key}", self.section), source.to_string());
        value
    }

    fn required<T>(&mut self, key: &str, flag: Option<T>, file: Option<T>) -> Result<T> {
        let full = format!("{}.{key}", self.section);
        let (value, source) = match (flag, file) {
            (Some(v), _) => (v, "flag"),
            (None, Some(v)) => (v, "file"),
            (None, None) => return Err(LabError::config(full, "missing required value")),
        };
        self.prov.insert(full, source.to_string());
        Ok(value)
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> LabError {
        LabError::config(format!("{}.{key}", self.section), msg)
    }
}

fn parse_head(scope: &Scope<'_>, s: &str) -> Result<HeadKind> {
    match s {
        "relation" => Ok(HeadKind::Relation),
        "can" | "cross_attention" | "cross-attention" => Ok(HeadKind::CrossAttention),
        other => Err(scope.err("head", format!("unknown head `{other}` (expected relation or can)"))),
    }
}

fn parse_variant(scope: &Scope<'_>, s: &str) -> Result<LossVariant> {
    match s {
        "fpa" => Ok(LossVariant::Fpa),
        "fpa-prime" | "fpa_prime" => Ok(LossVariant::FpaPrime),
        "standard" | "standard_ae" => Ok(LossVariant::StandardAe),
        other => Err(scope.err(
            "variant",
            format!("unknown variant `{other}` (expected fpa, fpa-prime, or standard)"),
        )),
    }
}

fn parse_attack_kind(scope: &Scope<'_>, s: &str) -> Result<AttackKind> {
    match s {
        "pgd" => Ok(AttackKind::Pgd),
        "cw-sgd" | "cw_sgd" => Ok(AttackKind::CwSgd),
        other => Err(scope.err("kind", format!("unknown attack `{other}` (expected pgd or cw-sgd)"))),
    }
}

fn parse_filter_kind(scope: &Scope<'_>, s: &str) -> Result<FilterKind> {
    match s {
        "identity" => Ok(FilterKind::Identity),
        "noise" => Ok(FilterKind::Noise),
        "median_2x2" | "median-2x2" | "median" => Ok(FilterKind::Median2x2),
        "fpa" => Ok(FilterKind::Fpa),
        "fpa_prime" | "fpa-prime" => Ok(FilterKind::FpaPrime),
        other => Err(scope.err("filters", format!("unknown filter `{other}`"))),
    }
}

/// Reads the config file (when given) and the environment, then merges
/// flags over file values over defaults into a validated [`ResolvedRun`].
pub fn resolve(cli: Cli) -> Result<ResolvedRun> {
    let file = match &cli.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };
    let env_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    resolve_with(cli, file, env_root)
}

/// [`resolve`] with the file config and environment supplied by the caller.
pub fn resolve_with(cli: Cli, file: FileConfig, env_root: Option<PathBuf>) -> Result<ResolvedRun> {
    let mut prov = BTreeMap::new();
    let (root, root_src) = match (cli.output_root, env_root, file.output_root) {
        (Some(v), _, _) => (v, "flag"),
        (None, Some(v), _) => (v, "env"),
        (None, None, Some(v)) => (v, "file"),
        (None, None, None) => (PathBuf::from(DEFAULT_OUTPUT_ROOT), "default"),
    };
    prov.insert("output_root".to_string(), root_src.to_string());
    let global_seed = cli.seed.or(file.seed);

    let command = match cli.command {
        Command::GenData(args) => {
            let f = file.gen_data.unwrap_or_default();
            let mut s = Scope { section: "gen_data", prov: &mut prov };
            let resize_flag = match args.resize {
                None => None,
                Some(v) if v.len() == 2 => Some((v[0], v[1])),
                Some(v) => {
                    return Err(s.err("resize", format!("expected height,width; got {v:?}")))
                }
            };
            let resize_file = match f.resize {
                None => None,
                Some(v) if v.len() == 2 => Some((v[0], v[1])),
                Some(v) => {
                    return Err(s.err("resize", format!("expected [height, width]; got {v:?}")))
                }
            };
            let cfg = GenDataConfig {
                n_classes: s.pick("n_classes", args.n_classes, f.n_classes, 16),
                samples_per_class: s.pick("samples_per_class", args.samples_per_class, f.samples_per_class, 24),
                channels: s.pick("channels", args.channels, f.channels, 3),
                height: s.pick("height", args.height, f.height, 16),
                width: s.pick("width", args.width, f.width, 16),
                signal: s.pick("signal", args.signal, f.signal, 2.0),
                noise_std: s.pick("noise_std", args.noise_std, f.noise_std, 0.05),
                train_classes: s.pick("train_classes", args.train_classes, f.train_classes, 8),
                val_classes: s.pick("val_classes", args.val_classes, f.val_classes, 4),
                test_classes: s.pick("test_classes", args.test_classes, f.test_classes, 4),
                image_root: s.optional("image_root", args.image_root, f.image_root),
                split_spec: s.optional("split_spec", args.split_spec, f.split_spec),
                resize: s.optional("resize", resize_flag, resize_file),
                seed: s.pick("seed", args.seed.or(global_seed), f.seed, 7),
            };
            validate_gen_data(&cfg)?;
            CommandConfig::GenData(cfg)
        }
        Command::TrainModel(args) => {
            let f = file.train_model.unwrap_or_default();
            let mut s = Scope { section: "train_model", prov: &mut prov };
            let head = s.pick("head", args.head, f.head, String::from("relation"));
            let cfg = TrainModelConfig {
                train_data: s.required("train_data", args.train_data, f.train_data)?,
                val_data: s.required("val_data", args.val_data, f.val_data)?,
                head: parse_head(&s, &head)?,
                base_channels: s.pick("base_channels", args.base_channels, f.base_channels, 12),
                relation_hidden: s.pick("relation_hidden", args.relation_hidden, f.relation_hidden, 8),
                init_seed: s.pick("init_seed", args.init_seed, f.init_seed, 5),
                epochs: s.pick("epochs", args.epochs, f.epochs, 10),
                episodes_per_epoch: s.pick("episodes_per_epoch", args.episodes_per_epoch, f.episodes_per_epoch, 50),
                ways: s.pick("ways", args.ways, f.ways, 5),
                shots: s.pick("shots", args.shots, f.shots, 5),
                queries_total: s.pick("queries_total", args.queries_total, f.queries_total, 30),
                learning_rate: s.pick("learning_rate", args.learning_rate, f.learning_rate, 3e-3),
                val_episodes: s.pick("val_episodes", args.val_episodes, f.val_episodes, 15),
                seed: s.pick("seed", args.seed.or(global_seed), f.seed, 5),
            };
            validate_train_model(&cfg)?;
            CommandConfig::TrainModel(cfg)
        }
        Command::TrainAe(args) => {
            let f = file.train_ae.unwrap_or_default();
            let mut s = Scope { section: "train_ae", prov: &mut prov };
            let variant = s.pick("variant", args.variant, f.variant, String::from("fpa"));
            let cfg = TrainAeConfig {
                train_data: s.required("train_data", args.train_data, f.train_data)?,
                val_data: s.required("val_data", args.val_data, f.val_data)?,
                model: s.optional("model", args.model, f.model),
                variant: parse_variant(&s, &variant)?,
                epochs_standard: s.pick("epochs_standard", args.epochs_standard, f.epochs_standard, 10),
                epochs_finetune: s.pick("epochs_finetune", args.epochs_finetune, f.epochs_finetune, 10),
                learning_rate: s.pick("learning_rate", args.learning_rate, f.learning_rate, 1e-4),
                weight_decay: s.pick("weight_decay", args.weight_decay, f.weight_decay, 1e-4),
                lr_step_epochs: s.pick("lr_step_epochs", args.lr_step_epochs, f.lr_step_epochs, 10),
                lr_gamma: s.pick("lr_gamma", args.lr_gamma, f.lr_gamma, 0.1),
                batch_size: s.pick("batch_size", args.batch_size, f.batch_size, 16),
                reference_ways: s.pick("reference_ways", args.reference_ways, f.reference_ways, 5),
                reference_shots: s.pick("reference_shots", args.reference_shots, f.reference_shots, 5),
                augment: s.pick("augment", args.augment, f.augment, true),
                denoise_max_std: s.pick("denoise_max_std", args.denoise_max_std, f.denoise_max_std, 0.1),
                seed: s.pick("seed", args.seed.or(global_seed), f.seed, 0),
            };
            validate_train_ae(&cfg)?;
            CommandConfig::TrainAe(cfg)
        }
        Command::Attack(args) => {
            let f = file.attack.unwrap_or_default();
            let mut s = Scope { section: "attack", prov: &mut prov };
            let kind_name = s.pick("kind", args.kind, f.kind, String::from("pgd"));
            let kind = parse_attack_kind(&s, &kind_name)?;
            // Each attack family carries its own reference settings (step
            // size in particular differs by orders of magnitude).
            let base = match kind {
                AttackKind::Pgd => AttackConfig::pgd(),
                AttackKind::CwSgd => AttackConfig::cw_sgd(),
            };
            let eps_file = match f.epsilon {
                Some(fr) => Some(fr.resolve("attack.epsilon")?),
                None => None,
            };
            let eta_file = match f.eta {
                Some(fr) => Some(fr.resolve("attack.eta")?),
                None => None,
            };
            let cfg = AttackCmdConfig {
                model: s.required("model", args.model, f.model)?,
                data: s.required("data", args.data, f.data)?,
                kind,
                epsilon: s.pick("epsilon", args.epsilon, eps_file, base.epsilon),
                eta: s.pick("eta", args.eta, eta_file, base.eta),
                iterations: s.pick("iterations", args.iterations, f.iterations, base.iterations),
                kappa: s.pick("kappa", args.kappa, f.kappa, base.kappa),
                const_weight: s.pick("const_weight", args.const_weight, f.const_weight, base.const_weight),
                targets: s.pick("targets", args.targets, f.targets, Vec::new()),
                sets_per_class: s.pick("sets_per_class", args.sets_per_class, f.sets_per_class, 10),
                ways: s.pick("ways", args.ways, f.ways, 5),
                shots: s.pick("shots", args.shots, f.shots, 5),
                queries_per_episode: s.pick("queries_per_episode", args.queries_per_episode, f.queries_per_episode, 15),
                seed: s.pick("seed", args.seed.or(global_seed), f.seed, 0),
            };
            validate_attack(&cfg)?;
            CommandConfig::Attack(cfg)
        }
        Command::Detect(args) => {
            let f = file.detect.unwrap_or_default();
            let mut s = Scope { section: "detect", prov: &mut prov };
            let filter_names = s.pick("filters", args.filters, f.filters, Vec::new());
            let filters = filter_names
                .iter()
                .map(|name| parse_filter_kind(&s, name))
                .collect::<Result<Vec<_>>>()?;
            let cfg = DetectConfig {
                model: s.required("model", args.model, f.model)?,
                data: s.required("data", args.data, f.data)?,
                records: s.required("records", args.records, f.records)?,
                autoencoders: s.pick("autoencoders", args.autoencoders, f.autoencoders, Vec::new()),
                filters,
                clean_sets_per_class: s.optional(
                    "clean_sets_per_class",
                    args.clean_sets_per_class,
                    f.clean_sets_per_class,
                ),
                model_sha256: s.optional("model_sha256", args.model_sha256, f.model_sha256),
                data_sha256: s.optional("data_sha256", args.data_sha256, f.data_sha256),
                seed: s.pick("seed", args.seed.or(global_seed), f.seed, 0),
            };
            CommandConfig::Detect(cfg)
        }
        Command::Evaluate(args) => {
            let f = file.evaluate.unwrap_or_default();
            let mut s = Scope { section: "evaluate", prov: &mut prov };
            let cfg = EvaluateConfig {
                model: s.required("model", args.model, f.model)?,
                data: s.required("data", args.data, f.data)?,
                records: s.optional("records", args.records, f.records),
                scores: s.optional("scores", args.scores, f.scores),
                n_eval_episodes: s.pick("n_eval_episodes", args.n_eval_episodes, f.n_eval_episodes, 200),
                ways: s.pick("ways", args.ways, f.ways, 5),
                shots: s.pick("shots", args.shots, f.shots, 5),
                queries_total: s.pick("queries_total", args.queries_total, f.queries_total, 30),
                model_sha256: s.optional("model_sha256", args.model_sha256, f.model_sha256),
                data_sha256: s.optional("data_sha256", args.data_sha256, f.data_sha256),
                seed: s.pick("seed", args.seed.or(global_seed), f.seed, 0),
            };
            validate_evaluate(&cfg)?;
            CommandConfig::Evaluate(cfg)
        }
        Command::Report(args) => {
            let f = file.report.unwrap_or_default();
            let mut s = Scope { section: "report", prov: &mut prov };
            let cfg = ReportConfig {
                tables: s.required("tables", args.tables, f.tables)?,
            };
            CommandConfig::Report(cfg)
        }
    };

    Ok(ResolvedRun {
        command,
        output_root: root,
        provenance: prov,
    })
}

// ---------------------------------------------------------------------------
// Validation (range errors carry the dotted key path)
// ---------------------------------------------------------------------------

fn check(ok: bool, key: &str, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(LabError::config(key, msg))
    }
}

fn validate_gen_data(cfg: &GenDataConfig) -> Result<()> {
    if let Some(root) = &cfg.image_root {
        check(
            cfg.split_spec.is_some(),
            "gen_data.split_spec",
            format!("required when image_root ({}) is set", root.display()),
        )?;
        return Ok(());
    }
    check(cfg.n_classes >= 1, "gen_data.n_classes", "must be at least 1")?;
    check(cfg.samples_per_class >= 1, "gen_data.samples_per_class", "must be at least 1")?;
    check(
        cfg.channels >= 1 && cfg.height >= 1 && cfg.width >= 1,
        "gen_data.channels",
        "image dimensions must all be at least 1",
    )?;
    check(cfg.signal >= 0.0, "gen_data.signal", format!("must be >= 0, got {}", cfg.signal))?;
    check(
        cfg.noise_std >= 0.0,
        "gen_data.noise_std",
        format!("must be >= 0, got {}", cfg.noise_std),
    )?;
    check(
        cfg.train_classes + cfg.val_classes + cfg.test_classes == cfg.n_classes,
        "gen_data.train_classes",
        format!(
            "train/val/test classes ({}/{}/{}) must sum to n_classes ({})",
            cfg.train_classes, cfg.val_classes, cfg.test_classes, cfg.n_classes
        ),
    )?;
    check(
        cfg.train_classes >= 1 && cfg.val_classes >= 1 && cfg.test_classes >= 1,
        "gen_data.train_classes",
        "every split needs at least one class",
    )
}

fn validate_train_model(cfg: &TrainModelConfig) -> Result<()> {
    check(cfg.base_channels >= 1, "train_model.base_channels", "must be at least 1")?;
    check(cfg.relation_hidden >= 1, "train_model.relation_hidden", "must be at least 1")?;
    check(cfg.epochs >= 1, "train_model.epochs", "must be at least 1")?;
    check(cfg.episodes_per_epoch >= 1, "train_model.episodes_per_epoch", "must be at least 1")?;
    check(cfg.ways >= 2, "train_model.ways", "episodes need at least 2 ways")?;
    check(cfg.shots >= 1, "train_model.shots", "must be at least 1")?;
    check(
        cfg.queries_total >= 1 && cfg.queries_total % cfg.ways == 0,
        "train_model.queries_total",
        format!("must be a positive multiple of ways ({})", cfg.ways),
    )?;
    check(
        cfg.learning_rate > 0.0,
        "train_model.learning_rate",
        format!("must be > 0, got {}", cfg.learning_rate),
    )?;
    check(cfg.val_episodes >= 1, "train_model.val_episodes", "must be at least 1")
}

fn validate_train_ae(cfg: &TrainAeConfig) -> Result<()> {
    check(
        cfg.learning_rate > 0.0,
        "train_ae.learning_rate",
        format!("must be > 0, got {}", cfg.learning_rate),
    )?;
    check(
        cfg.weight_decay >= 0.0,
        "train_ae.weight_decay",
        format!("must be >= 0, got {}", cfg.weight_decay),
    )?;
    check(cfg.lr_step_epochs >= 1, "train_ae.lr_step_epochs", "must be at least 1")?;
    check(
        cfg.lr_gamma > 0.0 && cfg.lr_gamma <= 1.0,
        "train_ae.lr_gamma",
        format!("must be in (0, 1], got {}", cfg.lr_gamma),
    )?;
    check(cfg.batch_size >= 1, "train_ae.batch_size", "must be at least 1")?;
    check(
        cfg.denoise_max_std >= 0.0,
        "train_ae.denoise_max_std",
        format!("must be >= 0, got {}", cfg.denoise_max_std),
    )?;
    match cfg.variant {
        LossVariant::StandardAe => {
            check(cfg.epochs_standard >= 1, "train_ae.epochs_standard", "must be at least 1")
        }
        LossVariant::Fpa | LossVariant::FpaPrime => {
            check(cfg.epochs_finetune >= 1, "train_ae.epochs_finetune", "must be at least 1")?;
            check(
                cfg.model.is_some(),
                "train_ae.model",
                "a classifier checkpoint is required for preservation losses",
            )
        }
    }
}

fn validate_attack(cfg: &AttackCmdConfig) -> Result<()> {
    check(
        cfg.epsilon >= 0.0,
        "attack.epsilon",
        format!("must be >= 0, got {}", cfg.epsilon),
    )?;
    check(cfg.eta > 0.0, "attack.eta", format!("must be > 0, got {}", cfg.eta))?;
    check(cfg.iterations >= 1, "attack.iterations", "must be at least 1")?;
    check(cfg.kappa >= 0.0, "attack.kappa", format!("must be >= 0, got {}", cfg.kappa))?;
    check(
        cfg.const_weight >= 0.0,
        "attack.const_weight",
        format!("must be >= 0, got {}", cfg.const_weight),
    )?;
    check(cfg.sets_per_class >= 1, "attack.sets_per_class", "must be at least 1")?;
    check(cfg.ways >= 2, "attack.ways", "episodes need at least 2 ways")?;
    check(cfg.shots >= 1, "attack.shots", "must be at least 1")?;
    check(cfg.queries_per_episode >= 1, "attack.queries_per_episode", "must be at least 1")
}

fn validate_evaluate(cfg: &EvaluateConfig) -> Result<()> {
    check(cfg.n_eval_episodes >= 2, "evaluate.n_eval_episodes", "must be at least 2")?;
    check(cfg.ways >= 2, "evaluate.ways", "episodes need at least 2 ways")?;
    check(cfg.shots >= 1, "evaluate.shots", "must be at least 1")?;
    check(
        cfg.queries_total >= 1 && cfg.queries_total % cfg.ways == 0,
        "evaluate.queries_total",
        format!("must be a positive multiple of ways ({})", cfg.ways),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn fraction_syntax_matches_paper_units_exactly() {
        assert_eq!(parse_fraction("12/255").unwrap(), 12.0 / 255.0);
        assert_eq!(parse_fraction("0.05").unwrap(), 0.05);
        assert_eq!(parse_fraction(" 3 / 4 ").unwrap(), 0.75);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("abc").is_err());
    }

    #[test]
    fn attack_flags_build_the_paper_config() {
        let cli = parse(&[
            "fewshot", "attack", "--model", "m.fsa", "--data", "d.fsa", "--kind", "pgd",
            "--epsilon", "12/255", "--eta", "0.05",
        ]);
        let run = resolve_with(cli, FileConfig::default(), None).unwrap();
        match run.command {
            CommandConfig::Attack(cfg) => {
                assert_eq!(cfg.kind, AttackKind::Pgd);
                assert_eq!(cfg.epsilon, 12.0 / 255.0);
                assert_eq!(cfg.eta, 0.05);
                assert_eq!(cfg.iterations, 100);
            }
            other => panic!("wrong command: {other:?}"),
        }
        assert_eq!(run.provenance["attack.epsilon"], "flag");
        assert_eq!(run.provenance["attack.iterations"], "default");
    }

    #[test]
    fn flags_override_file_values_and_provenance_records_it() {
        let file: FileConfig = serde_yaml::from_str(
            "attack:\n  model: from-file.fsa\n  data: d.fsa\n  epsilon: 8/255\n  iterations: 7\n",
        )
        .unwrap();
        let cli = parse(&["fewshot", "attack", "--epsilon", "0.1"]);
        let run = resolve_with(cli, file, None).unwrap();
        match run.command {
            CommandConfig::Attack(cfg) => {
                assert_eq!(cfg.model, PathBuf::from("from-file.fsa"));
                assert_eq!(cfg.epsilon, 0.1);
                assert_eq!(cfg.iterations, 7);
            }
            other => panic!("wrong command: {other:?}"),
        }
        assert_eq!(run.provenance["attack.model"], "file");
        assert_eq!(run.provenance["attack.epsilon"], "flag");
        assert_eq!(run.provenance["attack.iterations"], "file");
    }

    #[test]
    fn yaml_fraction_strings_and_json_numbers_both_work() {
        let yaml: FileConfig =
            serde_yaml::from_str("attack:\n  epsilon: 12/255\n").unwrap();
        match yaml.attack.unwrap().epsilon.unwrap() {
            Fraction::Text(s) => assert_eq!(s, "12/255"),
            other => panic!("expected text, got {other:?}"),
        }
        let json: FileConfig =
            serde_json::from_str(r#"{"attack": {"epsilon": 0.047}}"#).unwrap();
        match json.attack.unwrap().epsilon.unwrap() {
            Fraction::Number(v) => assert_eq!(v, 0.047),
            other => panic!("expected number, got {other:?}"),
        }
    }

    #[test]
    fn unknown_file_keys_are_rejected_by_name() {
        let err = serde_yaml::from_str::<FileConfig>("attack:\n  epsilonn: 0.1\n").unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
    }

    #[test]
    fn missing_required_path_names_the_key() {
        let cli = parse(&["fewshot", "train-model"]);
        let err = resolve_with(cli, FileConfig::default(), None).unwrap_err();
        assert!(err.to_string().contains("train_model.train_data"), "{err}");
    }

    #[test]
    fn out_of_range_values_name_the_key_path() {
        let cli = parse(&[
            "fewshot", "attack", "--model", "m", "--data", "d", "--epsilon", "-1",
        ]);
        let err = resolve_with(cli, FileConfig::default(), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("attack.epsilon") && msg.contains("-1"), "{msg}");

        let cli = parse(&["fewshot", "gen-data", "--n-classes", "5", "--train-classes", "9"]);
        let err = resolve_with(cli, FileConfig::default(), None).unwrap_err();
        assert!(err.to_string().contains("gen_data.train_classes"), "{err}");
    }

    #[test]
    fn output_root_precedence_is_flag_env_file_default() {
        let file: FileConfig = serde_yaml::from_str("output_root: from-file\n").unwrap();
        let cli = parse(&["fewshot", "report", "--tables", "t"]);
        let run = resolve_with(cli, file, Some(PathBuf::from("from-env"))).unwrap();
        assert_eq!(run.output_root, PathBuf::from("from-env"));
        assert_eq!(run.provenance["output_root"], "env");

        let file: FileConfig = serde_yaml::from_str("output_root: from-file\n").unwrap();
        let cli = parse(&["fewshot", "--output-root", "from-flag", "report", "--tables", "t"]);
        let run = resolve_with(cli, file, Some(PathBuf::from("from-env"))).unwrap();
        assert_eq!(run.output_root, PathBuf::from("from-flag"));

        let cli = parse(&["fewshot", "report", "--tables", "t"]);
        let run = resolve_with(cli, FileConfig::default(), None).unwrap();
        assert_eq!(run.output_root, PathBuf::from(DEFAULT_OUTPUT_ROOT));
        assert_eq!(run.provenance["output_root"], "default");
    }

    #[test]
    fn global_seed_feeds_the_subcommand_seed() {
        let cli = parse(&["fewshot", "--seed", "99", "attack", "--model", "m", "--data", "d"]);
        let run = resolve_with(cli, FileConfig::default(), None).unwrap();
        match run.command {
            CommandConfig::Attack(cfg) => assert_eq!(cfg.seed, 99),
            other => panic!("wrong command: {other:?}"),
        }
    }

    #[test]
    fn ae_preservation_variants_require_a_model() {
        let cli = parse(&[
            "fewshot", "train-ae", "--train-data", "t", "--val-data", "v", "--variant", "fpa",
        ]);
        let err = resolve_with(cli, FileConfig::default(), None).unwrap_err();
        assert!(err.to_string().contains("train_ae.model"), "{err}");

        let cli = parse(&[
            "fewshot", "train-ae", "--train-data", "t", "--val-data", "v", "--variant", "standard",
        ]);
        assert!(resolve_with(cli, FileConfig::default(), None).is_ok());
    }
}
