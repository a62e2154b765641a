use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use roadtraj::mapmatch::MatchParams;
use roadtraj::pretrain::PretrainConfig;
use roadtraj::tasks::{FinetuneConfig, TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::run::CliError;

#[derive(Parser, Debug)]
#[command(name = "roadtraj", version, about = "Road-network-aware trajectory pre-training and task evaluation")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 (the default) runs serially.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for every output of this run.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a grid network and constant-speed trajectories with exact matches.
    Synth(SynthArgs),
    /// Map-match raw trajectories onto a network.
    Match(DataArgs),
    /// Pre-train a model on matched trajectories.
    Pretrain(TrainArgs),
    /// Fine-tune a checkpoint for one task.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Rank test-split candidates for query trajectories.
    Search(SearchArgs),
    /// Write class-item embeddings of trajectories.
    Embed(EmbedArgs),
    /// Finite-difference check of a fresh model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub spacing: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub interval: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory with nodes.csv and edges.csv.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Trajectory CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct MatchedArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Matched-point CSV aligned with the trajectories.
    #[arg(long)]
    pub matched: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub inputs: MatchedArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Disable the contrastive term.
    #[arg(long)]
    pub no_contrastive: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub inputs: MatchedArgs,
    #[arg(long)]
    pub task: TaskArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: MatchedArgs,
    #[arg(long)]
    pub task: TaskArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sparse input interval in seconds (recovery, search).
    #[arg(long)]
    pub mu: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub inputs: MatchedArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query trajectory ids (default: every test trajectory).
    #[arg(long = "query")]
    pub queries: Vec<u64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Rows written per query.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub inputs: MatchedArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum TaskArg {
    Tte,
    Recover,
    Predict,
    Search,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Tte => TaskKind::Tte,
            TaskArg::Recover => TaskKind::Recover,
            TaskArg::Predict => TaskKind::Predict,
            TaskArg::Search => TaskKind::Search,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub delta_m: f64,
    pub ffn_mult: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { dim: 128, heads: 8, layers: 2, delta_m: 100.0, ffn_mult: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    pub origin_lng: f64,
    pub origin_lat: f64,
    pub n: usize,
    pub interval_s: f64,
    pub noise_sigma_m: f64,
    pub min_speed_mps: f64,
    pub max_speed_mps: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            rows: 6,
            cols: 6,
            spacing_m: 500.0,
            origin_lng: 104.0,
            origin_lat: 30.6,
            n: 500,
            interval_s: 15.0,
            noise_sigma_m: 0.0,
            min_speed_mps: 8.0,
            max_speed_mps: 12.0,
        }
    }
}

/// Everything a run depends on. Written back, fully resolved, into
/// `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub network: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub matched: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelSection,
    pub synth: SynthSection,
    pub matching: MatchParams,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub task: TaskSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            network: None,
            data: None,
            matched: None,
            checkpoint: None,
            model: ModelSection::default(),
            synth: SynthSection::default(),
            matching: MatchParams::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            task: TaskSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read(path).map_err(|e| CliError::Missing(path.to_path_buf(), e.to_string()))?;
        serde_json::from_slice(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn set<T>(slot: &mut T, v: Option<T>) {
        if let Some(v) = v {
            *slot = v;
        }
    }

    pub fn apply_globals(&mut self, cli: &Cli) {
        Self::set(&mut self.seed, cli.seed);
        Self::set(&mut self.workers, cli.workers);
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    pub fn apply_data(&mut self, a: &DataArgs) {
        Self::set(&mut self.network, a.network.clone().map(Some));
        Self::set(&mut self.data, a.data.clone().map(Some));
    }

    pub fn apply_matched(&mut self, a: &MatchedArgs) {
        self.apply_data(&a.data);
        Self::set(&mut self.matched, a.matched.clone().map(Some));
    }

    pub fn apply_synth(&mut self, a: &SynthArgs) {
        let s = &mut self.synth;
        Self::set(&mut s.rows, a.rows);
        Self::set(&mut s.cols, a.cols);
        Self::set(&mut s.spacing_m, a.spacing);
        Self::set(&mut s.n, a.n);
        Self::set(&mut s.interval_s, a.interval);
        Self::set(&mut s.noise_sigma_m, a.noise);
    }

    pub fn apply_train(&mut self, a: &TrainArgs) {
        self.apply_matched(&a.inputs);
        Self::set(&mut self.pretrain.epochs, a.epochs);
        Self::set(&mut self.pretrain.batch_size, a.batch_size);
        Self::set(&mut self.pretrain.lr, a.lr);
        Self::set(&mut self.model.dim, a.dim);
        Self::set(&mut self.model.layers, a.layers);
        if a.no_contrastive {
            self.pretrain.contrastive = false;
        }
    }
}
