//! Command-line flags and their translation into a [`RunConfig`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neuropath::baselines::{ScoreMethod, ThresholdScope};
use neuropath::data::DatasetSource;
use neuropath::evaluation::AccuracyReference;
use neuropath::training::TrainConfig;

use crate::config::*;

#[derive(Debug, Parser)]
#[command(name = "neuropath", version, about = "Neural pathway explanations for convolutional classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Output directory and seed, shared by every command.
#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long, env = "NEUROPATH_OUT", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, env = "NEUROPATH_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a small target classifier (desk-scale fixture).
    Fixture {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "toy3")]
        arch: String,
        /// blobs:COUNT[:SEED], cifar10:PATH or dir:PATH[:SIZE]
        #[arg(long, value_parser = parse_dataset, default_value = "blobs:512:1")]
        dataset: DatasetSource,
        /// Held-out data for reporting test accuracy.
        #[arg(long, value_parser = parse_dataset)]
        test: Option<DatasetSource>,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Train a pathway generator against a frozen model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_dataset)]
        dataset: DatasetSource,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.001)]
        beta: f64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Save a checkpoint every N epochs (0 keeps only the final one).
        #[arg(long, default_value_t = 1)]
        checkpoint_every: usize,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        pdn_depth: Option<usize>,
        #[arg(long)]
        pdn_hidden: Option<usize>,
        #[arg(long)]
        quant_bits: Option<u32>,
    },
    /// Write one mask file per sample plus an index.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long, value_parser = parse_dataset)]
        dataset: DatasetSource,
        #[arg(long, value_enum, default_value = "genpath")]
        method: Method,
        /// Firing sparsity for thresholded and random masks.
        #[arg(long, default_value_t = 0.9)]
        sparsity: f64,
        #[arg(long, value_enum, default_value = "per-layer")]
        scope: Scope,
        /// Integrated-gradients steps.
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Scores ordering greedy pruning.
        #[arg(long, value_enum, default_value = "taylor")]
        greedy_scores: ScoreArg,
        /// Explain only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Faithfulness, class overlap and removal curves of a mask directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, value_parser = parse_dataset)]
        dataset: Option<DatasetSource>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "faithfulness,aciou,roap")]
        metrics: Vec<Metric>,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.3,0.4,0.5,0.6,0.7,0.8")]
        roap_grid: Vec<f64>,
        #[arg(long, value_enum, default_value = "model")]
        reference: Reference,
    },
    /// Class pathways over sample-subset and firing-rate thresholds.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, value_parser = parse_dataset)]
        dataset: Option<DatasetSource>,
        #[arg(long, value_delimiter = ',', default_value = "0.6")]
        eps_ss: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        eps_cn: Vec<f64>,
    },
    /// Heat maps, saliency, embedding scatter plots and curve charts.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, value_parser = parse_dataset)]
        dataset: Option<DatasetSource>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Comma-separated tables to plot; repeatable.
        #[arg(long = "curve")]
        curves: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        scale: u32,
    },
    /// Run a command again from its manifest.
    Rerun {
        manifest: PathBuf,
        /// Write into this directory instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Scope {
    PerLayer,
    Global,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ScoreArg {
    Taylor,
    Intgrad,
    Magnitude,
    Genpath,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Reference {
    Model,
    Label,
}

/// What the parsed command line asks for.
#[derive(Debug)]
pub enum Invocation {
    Run(RunConfig),
    Rerun { manifest: PathBuf, out: Option<PathBuf> },
}

impl Command {
    pub fn into_invocation(self) -> Invocation {
        let run = |common: Common, command| Invocation::Run(RunConfig { out: common.out, seed: common.seed, command });
        match self {
            Command::Fixture { common, arch, dataset, test, epochs, lr, batch_size } => run(
                common,
                CommandConfig::Fixture(FixtureConfig { arch, dataset, test, epochs, learning_rate: lr, batch_size }),
            ),
            Command::Train {
                common,
                model,
                dataset,
                alpha,
                beta,
                lr,
                epochs,
                batch_size,
                checkpoint_every,
                tau,
                pdn_depth,
                pdn_hidden,
                quant_bits,
            } => {
                let train = TrainConfig {
                    alpha,
                    beta,
                    learning_rate: lr,
                    epochs,
                    batch_size,
                    seed: common.seed,
                    checkpoint_every,
                    dataset: None,
                };
                let generator = GeneratorOptions { tau, pdn_depth, pdn_hidden, quant_bits };
                run(common, CommandConfig::Train(TrainCommand { model, dataset, train, generator }))
            }
            Command::Explain { common, model, generator, dataset, method, sparsity, scope, steps, greedy_scores, limit } => {
                let scope = match scope {
                    Scope::PerLayer => ThresholdScope::PerLayer,
                    Scope::Global => ThresholdScope::Global,
                };
                let greedy_scores = match greedy_scores {
                    ScoreArg::Taylor => ScoreMethod::Taylor,
                    ScoreArg::Intgrad => ScoreMethod::Intgrad,
                    ScoreArg::Magnitude => ScoreMethod::Magnitude,
                    ScoreArg::Genpath => ScoreMethod::Genpath,
                };
                run(
                    common,
                    CommandConfig::Explain(ExplainConfig {
                        model,
                        generator,
                        dataset,
                        method,
                        sparsity,
                        scope,
                        steps,
                        greedy_scores,
                        limit,
                    }),
                )
            }
            Command::Eval { common, model, masks, dataset, metrics, roap_grid, reference } => {
                let reference = match reference {
                    Reference::Model => AccuracyReference::Model,
                    Reference::Label => AccuracyReference::Label,
                };
                run(common, CommandConfig::Eval(EvalConfig { model, masks, dataset, metrics, roap_grid, reference }))
            }
            Command::Transfer { common, model, masks, dataset, eps_ss, eps_cn } => {
                run(common, CommandConfig::Transfer(TransferConfig { model, masks, dataset, eps_ss, eps_cn }))
            }
            Command::Viz { common, model, masks, dataset, generator, count, curves, scale } => {
                run(common, CommandConfig::Viz(VizConfig { model, masks, dataset, generator, count, curves, scale }))
            }
            Command::Rerun { manifest, out } => Invocation::Rerun { manifest, out },
        }
    }
}

/// Parses `args` (including the program name) into an invocation.
pub fn parse_from<I, T>(args: I) -> Result<Invocation, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Ok(Cli::try_parse_from(args)?.command.into_invocation())
}
