//! `kspace-rl`: data generation, training, evaluation, timing and
//! visualization for learned phase-encode selection.

mod commands;
mod config;
mod error;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::PolicyKind;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "kspace-rl",
    version,
    about = "Learned MRI phase-encode selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantom k-spaces to a KSP1 file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        slices: usize,
        /// Frequencies x phases, e.g. 64x64.
        #[arg(long, default_value = "64x64", value_parser = commands::parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ellipses per phantom, including the outer body.
        #[arg(long, default_value_t = 6)]
        ellipses: usize,
    },
    /// Train the phase transformer from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-slice SSIM, PSNR and NMSE of the final IFT reconstructions.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        policy: PolicyKind,
        /// Defaults to the checkpoint's value, else 6.
        #[arg(long)]
        preselect: Option<usize>,
        /// Defaults to the checkpoint's value, else 10.
        #[arg(long)]
        selections: Option<usize>,
        /// Evaluate only the first N slices.
        #[arg(long)]
        slices: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time single selections (forward pass + masked argmax).
    BenchTime {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        /// Time on the first slice of this file instead of a phantom.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-repeat CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write mask, selection order, reconstruction and ground truth as PGM.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        slice: usize,
        #[arg(long)]
        selections: Option<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Also write the selection frequency over every slice.
        #[arg(long)]
        average: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            slices,
            size,
            seed,
            ellipses,
        } => commands::gen_data(&out, slices, size, seed, ellipses),
        Command::Train { config, resume } => commands::train_cmd(&config, resume.as_deref()),
        Command::Evaluate {
            checkpoint,
            data,
            policy,
            preselect,
            selections,
            slices,
            seed,
            out,
        } => commands::evaluate(commands::EvalArgs {
            checkpoint: checkpoint.as_deref(),
            data: &data,
            policy,
            preselect,
            selections,
            slices,
            seed,
            out: out.as_deref(),
        }),
        Command::BenchTime {
            checkpoint,
            repeats,
            data,
            out,
        } => commands::bench_time(&checkpoint, repeats, data.as_deref(), out.as_deref()),
        Command::Visualize {
            checkpoint,
            data,
            slice,
            selections,
            out_dir,
            average,
        } => commands::visualize(commands::VisualizeArgs {
            checkpoint: &checkpoint,
            data: &data,
            slice,
            selections,
            out_dir: &out_dir,
            average,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kspace-rl: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
