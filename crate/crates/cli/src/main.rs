//! `dmn`: dataset generation, training, evaluation, inference and layout
//! tools for dynamic modular networks.
//!
//! Exit codes: 0 success, 1 usage, config or input error, 2 runtime
//! invariant violation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmn_core::trainer::Ablation;

#[derive(Parser, Debug)]
#[command(name = "dmn", version, about = "Dynamic modular networks for grid-world question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file, or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test question files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write reports plus the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: dmn_core::dataset::Split,
        #[arg(long)]
        out: PathBuf,
        /// Beam width for decoding layouts; 1 is greedy.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Execute the expert layouts instead of decoding.
        #[arg(long)]
        expert_layouts: bool,
        /// Also write one reasoning trace per question.
        #[arg(long)]
        trace: bool,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Answer one question about one scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A dataset record (JSON) or a bare scene graph.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Print the full reasoning trace as JSON.
        #[arg(long)]
        trace: bool,
        /// Write the trace and a manifest here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layout utilities.
    Layout {
        #[command(subcommand)]
        action: LayoutAction,
    },
}

#[derive(Subcommand, Debug)]
enum LayoutAction {
    /// Print the stack trace of a layout and its first violation.
    Validate { layout: String },
    /// Run a bound layout through the symbolic executor.
    Exec {
        layout: String,
        #[arg(long)]
        scene: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData { common, out } => commands::gen_data(&common, &out),
        Command::Train {
            common,
            data,
            out,
            ablation,
        } => commands::train(&common, &data, &out, ablation),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            beam,
            expert_layouts,
            trace,
            threads,
        } => commands::eval(&commands::EvalArgs {
            checkpoint,
            data,
            split,
            out,
            beam,
            expert_layouts,
            trace,
            threads,
        }),
        Command::Infer {
            checkpoint,
            scene,
            question,
            beam,
            trace,
            out,
        } => commands::infer(&checkpoint, &scene, &question, beam, trace, out.as_deref()),
        Command::Layout { action } => match action {
            LayoutAction::Validate { layout } => commands::layout_validate(&layout),
            LayoutAction::Exec { layout, scene } => commands::layout_exec(&layout, &scene),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
