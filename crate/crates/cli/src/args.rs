// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand};
use olakit::ola::Order;
use olakit::preprocess::PreprocessConfig;
use olakit::probe::Task;
use olakit::trace::Architecture;

#[derive(Debug, Parser)]
#[command(name = "olakit", version, about = "Order-level attention maps: decomposition, comparison and probing")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "OLAKIT_JOBS", default_value_t = 0)]
    pub jobs: usize,

    /// Key/value file whose entries act as flags; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic attention traces (and optional tag labels).
    Synth(SynthArgs),
    /// Check trace and map files against their invariants.
    Validate(ValidateArgs),
    /// Write order-level maps plus rollout for every trace.
    Decompose(DecomposeArgs),
    /// SSIM retrieval of target-model maps against a source-model gallery.
    Retrieve(RetrieveArgs),
    /// Nearest-neighbour classification of maps by source text.
    Classify(ClassifyArgs),
    /// Norm-based contribution maps for traces carrying projections.
    Contrib(ContribArgs),
    /// Train a task probe on one model's maps.
    ProbeTrain(ProbeTrainArgs),
    /// Evaluate frozen probe parameters on another model's maps.
    ProbeEval(ProbeEvalArgs),
    /// Render maps as grayscale PNG heatmaps.
    Render(RenderArgs),
}

/// The clap command with repeated flags resolving to their last value, which
/// is what lets configuration-file entries be overridden on the command line.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_owned()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

/// Comma-separated list flag such as `--orders 1,2,rollout`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

#[derive(Debug, Args)]
pub struct Preprocess {
    /// Side of the square grid every map is resized to.
    #[arg(long, default_value_t = 50)]
    pub target_size: usize,
    /// Entries above row mean + k·std are zeroed before normalization.
    #[arg(long, default_value_t = 3.0)]
    pub outlier_k: f64,
    /// Apply the causal mask even to bidirectional traces.
    #[arg(long)]
    pub causal: bool,
}

impl Preprocess {
    pub fn config(&self) -> PreprocessConfig {
        PreprocessConfig {
            outlier_k: self.outlier_k,
            target_size: self.target_size,
            causal: self.causal,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long = "out", value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value = "model")]
    pub model: String,
    #[arg(long, default_value_t = 20)]
    pub texts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 12)]
    pub min_len: usize,
    #[arg(long, default_value_t = 24)]
    pub max_len: usize,
    #[arg(long)]
    pub causal: bool,
    #[arg(long, default_value_t = 2.0)]
    pub logit_scale: f64,
    /// Per-model noise on the shared logits.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Relative noise increase per layer.
    #[arg(long, default_value_t = 0.0)]
    pub noise_growth: f64,
    /// Draw this model's logits independently of every other model.
    #[arg(long)]
    pub independent: bool,
    /// Plant a token tagging task with this many tags and write `labels.tsv`.
    #[arg(long)]
    pub tags: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    pub tag_strength: f64,
    /// Also store layer inputs and attention weights of this hidden size.
    #[arg(long, requires = "head_dim")]
    pub hidden_dim: Option<usize>,
    #[arg(long, requires = "hidden_dim")]
    pub head_dim: Option<usize>,
    #[arg(long, default_value_t = Architecture::LlamaQwen)]
    pub arch: Architecture,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Trace or map file, or a directory of them.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// Orders to write; rollout is always added.
    #[arg(long, default_value = "1,2,3")]
    pub orders: List<Order>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Gallery model: traces or map files.
    #[arg(long, value_name = "PATH")]
    pub source: PathBuf,
    /// Query model: traces or map files.
    #[arg(long, value_name = "PATH")]
    pub target: PathBuf,
    /// One report row per order.
    #[arg(long, alias = "orders", default_value = "1")]
    pub order: List<Order>,
    #[arg(long, default_value = "1,5")]
    pub k: List<usize>,
    #[command(flatten)]
    pub preprocess: Preprocess,
    /// Also write the report here.
    #[arg(long = "out", value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long, value_name = "PATH")]
    pub train: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub test: PathBuf,
    /// Orders stacked as channels.
    #[arg(long, alias = "order", default_value = "1")]
    pub orders: List<Order>,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[command(flatten)]
    pub preprocess: Preprocess,
    #[arg(long = "out", value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ContribArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeTrainArgs {
    #[arg(long)]
    pub task: Task,
    /// Source-model traces or map files.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    #[arg(long, default_value = "1,2")]
    pub orders: List<Order>,
    #[command(flatten)]
    pub preprocess: Preprocess,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Augmented copies added per training example.
    #[arg(long, default_value_t = 0)]
    pub augment_copies: usize,
    /// Parameter file; the loss log goes next to it as `<stem>.log.tsv`.
    #[arg(long = "out", value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeEvalArgs {
    #[arg(long, value_name = "FILE")]
    pub params: PathBuf,
    /// Target-model traces or map files.
    #[arg(long, alias = "in", value_name = "PATH")]
    pub target: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub outlier_k: f64,
    /// Fail with exit code 3 if the parameters differ from the stored checksum.
    #[arg(long)]
    pub assert_frozen: bool,
    #[arg(long = "out", value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Map, contribution or trace files.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// Orders rendered for trace inputs.
    #[arg(long, default_value = "1,2,3,rollout")]
    pub orders: List<Order>,
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long)]
    pub zero_max_row: bool,
    /// Map values through ln(1 + v) before scaling.
    #[arg(long)]
    pub log1p: bool,
}
