//! `trackerf`: synthesize scenes, train and evaluate models, render views
//! and track masks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trackerf_core::train::Task;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "trackerf", version, about = "Few-shot new-view synthesis of deforming objects")]
pub struct Cli {
    /// Run every kernel on the calling thread (bit-reproducible runs).
    #[arg(long, global = true, default_value_t = false)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic deforming scene into a dataset directory.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and a metrics report.
    Train(TrainArgs),
    /// Render one frame of a dataset with a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Pick one mask per frame from candidate masks.
    Masktrack(MasktrackArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene parameters as JSON; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Scene seed; texture and embedding seeds follow as seed+1, seed+2 [default: from config, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Msssr,
    Fscr,
    Ft,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Msssr => Task::Msssr,
            TaskArg::Fscr => Task::Fscr,
            TaskArg::Ft => Task::Ft,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directories. FSCR trains on all but the last and tests on the last.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Protocol to run [default: from config, else msssr]
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Output directory for the checkpoint, report and previews.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to fine-tune (required by ft).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Training configuration as JSON; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization and batches [default: from config, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer steps [default: from config, else 5000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Floating-point width of parameters and activations.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Frame to render.
    #[arg(long)]
    pub frame: usize,
    /// Known frames used as sources [default: from config, else 10]
    #[arg(long)]
    pub n_src: Option<usize>,
    /// Evaluation settings as JSON (samples, eval_chunk, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Unseen,
    Known,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Frames to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Unseen)]
    pub split: SplitArg,
    /// Score once per source count in {5, 10, 15, 20, 25}.
    #[arg(long, default_value_t = false)]
    pub n_src_sweep: bool,
    /// Known frames used as sources without the sweep [default: from config, else 10]
    #[arg(long)]
    pub n_src: Option<usize>,
    /// Evaluation settings as JSON (samples, eval_chunk, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MasktrackArgs {
    /// Directory of per-frame `[N,H,W]` candidate stacks and optional confidences.json.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Output directory for indices.json and the chosen masks.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(e.code())
        }
    }
}

impl CliError {
    fn one_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "code": self.code(), "message": self.to_string() }).to_string()
    }
}
