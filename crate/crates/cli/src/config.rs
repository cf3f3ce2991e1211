//! Run configuration and the JSON documents written next to every output.

use std::collections::BTreeMap;
use std::path::PathBuf;

use neuropath::baselines::{ScoreMethod, ThresholdScope};
use neuropath::data::{DatasetSource, Normalization};
use neuropath::evaluation::AccuracyReference;
use neuropath::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.json";

/// Everything needed to run one command again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    #[serde(flatten)]
    pub command: CommandConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum CommandConfig {
    Fixture(FixtureConfig),
    Train(TrainCommand),
    Explain(ExplainConfig),
    Eval(EvalConfig),
    Transfer(TransferConfig),
    Viz(VizConfig),
}

impl CommandConfig {
    pub fn name(&self) -> &'static str {
        match self {
            CommandConfig::Fixture(_) => "fixture",
            CommandConfig::Train(_) => "train",
            CommandConfig::Explain(_) => "explain",
            CommandConfig::Eval(_) => "eval",
            CommandConfig::Transfer(_) => "transfer",
            CommandConfig::Viz(_) => "viz",
        }
    }
}

/// Fits a small target classifier so there is something to explain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub arch: String,
    pub dataset: DatasetSource,
    pub test: Option<DatasetSource>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// Optional overrides of the generator defaults derived from the model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOptions {
    pub tau: Option<f64>,
    pub pdn_depth: Option<usize>,
    pub pdn_hidden: Option<usize>,
    pub quant_bits: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCommand {
    pub model: PathBuf,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    #[serde(default)]
    pub generator: GeneratorOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Genpath,
    Random,
    Taylor,
    Intgrad,
    Magnitude,
    Greedy,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Genpath => "genpath",
            Method::Random => "random",
            Method::Taylor => "taylor",
            Method::Intgrad => "intgrad",
            Method::Magnitude => "magnitude",
            Method::Greedy => "greedy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub model: PathBuf,
    pub generator: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub method: Method,
    /// Target firing sparsity for thresholded and random methods.
    pub sparsity: f64,
    pub scope: ThresholdScope,
    /// Integration steps for integrated gradients.
    pub steps: usize,
    /// Score ordering used by greedy pruning.
    pub greedy_scores: ScoreMethod,
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Faithfulness,
    Aciou,
    Roap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub model: PathBuf,
    /// Directory holding mask files and their index.
    pub masks: PathBuf,
    /// Defaults to the dataset recorded in the mask index.
    pub dataset: Option<DatasetSource>,
    pub metrics: Vec<Metric>,
    pub roap_grid: Vec<f64>,
    pub reference: AccuracyReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub model: PathBuf,
    pub masks: PathBuf,
    pub dataset: Option<DatasetSource>,
    pub eps_ss: Vec<f64>,
    pub eps_cn: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizConfig {
    pub model: PathBuf,
    pub masks: Option<PathBuf>,
    pub dataset: Option<DatasetSource>,
    pub generator: Option<PathBuf>,
    /// Number of samples rendered as heat maps.
    pub count: usize,
    /// Comma-separated tables plotted column-against-first-column.
    pub curves: Vec<PathBuf>,
    /// Pixel upscale factor of rendered images.
    pub scale: u32,
}

/// Written as `manifest.json` into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub run: RunConfig,
    pub normalization: Option<Normalization>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub file: String,
    pub label: usize,
    pub predicted: usize,
    pub firing_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
}

/// Describes a directory of per-sample mask files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIndex {
    pub schema_version: u32,
    pub method: String,
    pub dataset: Option<DatasetSource>,
    pub normalization: Option<Normalization>,
    pub model_checksum: Option<u32>,
    pub generator: Option<PathBuf>,
    /// Scores behind the masks, used to re-threshold for removal curves.
    pub score_method: Option<ScoreMethod>,
    pub steps: usize,
    pub mean_sparsity: f64,
    pub sparsity_sd: f64,
    pub entries: Vec<IndexEntry>,
}

/// Parses `blobs:COUNT[:SEED]`, `cifar10:PATH` or `dir:PATH[:SIZE]` where
/// SIZE is `N` or `HxW`.
pub fn parse_dataset(spec: &str) -> Result<DatasetSource, String> {
    let (kind, rest) = spec.split_once(':').ok_or_else(|| format!("dataset {spec:?} needs a kind prefix (blobs:, cifar10:, dir:)"))?;
    match kind {
        "blobs" => {
            let mut parts = rest.split(':');
            let count = parts.next().unwrap_or("").parse().map_err(|_| format!("bad blob count in {spec:?}"))?;
            let seed = match parts.next() {
                Some(s) => s.parse().map_err(|_| format!("bad blob seed in {spec:?}"))?,
                None => 0,
            };
            Ok(DatasetSource::Blobs { count, seed })
        }
        "cifar10" => Ok(DatasetSource::Cifar10 { path: rest.into() }),
        "dir" => {
            let (path, size) = match rest.rsplit_once(':') {
                Some((p, s)) if s.chars().all(|c| c.is_ascii_digit() || c == 'x') && !s.is_empty() => (p, parse_size(s)?),
                _ => (rest, (32, 32)),
            };
            Ok(DatasetSource::ImageDir { path: path.into(), size })
        }
        other => Err(format!("unknown dataset kind {other:?}; expected blobs, cifar10 or dir")),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("bad image size {s:?}");
    match s.split_once('x') {
        Some((h, w)) => Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)),
        None => {
            let n = s.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}
