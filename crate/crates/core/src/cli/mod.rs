//! The `hlat` command line: dataset generation, training, map generation,
//! evaluation, heatmap export and gradient checking.
//!
//! Settings come from built-in defaults, then an optional TOML file
//! (`--config`), then flags. The merged result is written as `config.toml`
//! next to each command's outputs. Results go to stdout as JSON; progress
//! and diagnostics go to stderr.

mod ab;
mod commands;
mod config;
mod eval;
mod gradsuite;
pub mod heatmap;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::answerer::MapSource;
use crate::data::Split;
use crate::error::Result;
use crate::metrics::RankFormula;

pub use ab::{reference_correlation, supervision_ab, AbReport, AbRow, ArmSummary};
pub use config::{EvalSection, HanSection, RunConfig, VqaSection};
pub use eval::{answer_accuracy, map_samples, score, Against, EvalReport, MetricEntry, PerSample, SampleOutput};
pub use gradsuite::{gradient_suite, SuiteOptions, ToyDims};

/// Exit status for a run-time error.
pub const EXIT_ERROR: u8 = 1;
/// Gradient-check failures exit with this bit set, plus one bit per failing model
/// in suite order: 1 attention network, 2 its mean-refine ablation,
/// 4 unsupervised answerer, 8 supervised answerer.
pub const EXIT_GRADCHECK: u8 = 16;

#[derive(Debug, Parser)]
#[command(name = "hlat", version, about = "Human-like attention supervision for visual question answering")]
pub struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log more detail to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted synthetic dataset.
    GenData(GenDataArgs),
    /// Train the attention network against reference maps.
    TrainHan(TrainHanArgs),
    /// Run a trained attention network over a dataset and store its maps.
    GenerateHlat(GenerateHlatArgs),
    /// Train the answerer, with or without attention supervision.
    TrainVqa(TrainVqaArgs),
    /// Train both answerer modes over several seeds and compare them.
    Ab(AbArgs),
    /// Score maps and answers: rank correlation and consensus accuracy.
    Eval(EvalArgs),
    /// Write attention maps as CSV grids and PGM images.
    ExportHeatmaps(ExportArgs),
    /// Finite-difference gradient check of every model at small dims.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    pub fn includes(self, split: Split) -> bool {
        match self {
            SplitArg::All => true,
            SplitArg::Train => split == Split::Train,
            SplitArg::Val => split == Split::Val,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MapSourceArg {
    Hlat,
    Reference,
}

impl From<MapSourceArg> for MapSource {
    fn from(m: MapSourceArg) -> Self {
        match m {
            MapSourceArg::Hlat => MapSource::Hlat,
            MapSourceArg::Reference => MapSource::Reference,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation passes.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    /// Std-dev of the Gaussian noise added to every non-signal cell.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Spread of each object's type signal onto nearby cells.
    #[arg(long)]
    pub spill: Option<f64>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer updates.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainHanArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoint, log and metrics.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub glimpses: Option<usize>,
    /// Replace recurrent refinement with the glimpse mean.
    #[arg(long)]
    pub no_refine_recurrent: bool,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateHlatArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Attention-network checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where to write the augmented dataset; defaults to updating `--data` in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct VqaModelArgs {
    /// Train with the attention-supervision branch.
    #[arg(long)]
    pub supervised: bool,
    /// Weight of the supervision loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub glimpses: Option<usize>,
    /// Maps the supervision branch is trained towards.
    #[arg(long, value_enum)]
    pub map_source: Option<MapSourceArg>,
    /// Average −log p over every candidate answer instead of the labeled one.
    #[arg(long)]
    pub literal_cls: bool,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainVqaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: VqaModelArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AbArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds 0..N.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[command(flatten)]
    pub model: VqaModelArgs,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Score maps predicted by an attention-network checkpoint.
    #[arg(long, conflicts_with_all = ["vqa", "maps"])]
    pub han: Option<PathBuf>,
    /// Score answers and attention of an answerer checkpoint.
    #[arg(long, conflicts_with_all = ["maps", "predictions"])]
    pub vqa: Option<PathBuf>,
    /// Directory of `<id>.map` files to score.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// JSON-lines file of predicted answers to score.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "annotators")]
    pub against: Against,
    /// Use the grid-side denominator `l² − l` in the rank-correlation formula.
    #[arg(long)]
    pub literal_rank: bool,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-sample scores as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Sample ids to export; defaults to the first `--limit` of the split.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
    /// Attention-network checkpoint to add as the `han` panel.
    #[arg(long)]
    pub han: Option<PathBuf>,
    /// Answerer checkpoint as `LABEL=PATH`; repeat to compare several.
    #[arg(long, value_parser = parse_labeled)]
    pub vqa: Vec<(String, PathBuf)>,
    /// Pixels per cell edge.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturb one analytic gradient per model (sentinel that the check can fail).
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

fn parse_labeled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), path.into())),
        _ => Err(format!("expected LABEL=PATH, got {s:?}")),
    }
}

impl EvalArgs {
    pub fn rank_formula(&self, config: &RunConfig) -> RankFormula {
        if self.literal_rank {
            RankFormula::LiteralGrid
        } else {
            config.eval.rank_formula
        }
    }
}

/// Run one parsed command line and return the process exit status.
pub fn run(cli: Cli) -> Result<u8> {
    let config = RunConfig::load(cli.config.as_deref())?;
    commands::dispatch(cli.command, config)
}
