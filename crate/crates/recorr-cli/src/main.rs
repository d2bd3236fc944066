//! Command-line entry points for the registration engine.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable or inconsistent files), 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use recorr::RecorrError;

#[derive(Parser)]
#[command(
    name = "recorr",
    version,
    about = "Deformable 3-D image registration via recurrent correlation search",
    after_help = commands::config_key_help(),
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth fields.
    Gen {
        /// JSON run configuration (see the key list under --help).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for volumes and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the registration network on a generated dataset.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, log, and resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Register one moving volume onto one fixed volume.
    Register {
        /// Fixed (target) volume, .vol3.
        #[arg(long)]
        fixed: PathBuf,
        /// Moving (source) volume, .vol3.
        #[arg(long)]
        moving: PathBuf,
        /// Trained checkpoint (mutually exclusive with --direct).
        #[arg(long, conflicts_with = "direct")]
        ckpt: Option<PathBuf>,
        /// Training-free mode using normalized patch descriptors.
        #[arg(long)]
        direct: bool,
        /// Integrate a velocity field for a fold-free deformation.
        #[arg(long)]
        diffeo: bool,
        /// Run configuration; for a checkpoint, pass the resolved config
        /// emitted by train so network shapes match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output displacement field, .vol3 (3 channels, voxel units).
        #[arg(long)]
        out: PathBuf,
        /// Also write the warped moving volume here.
        #[arg(long)]
        warped: Option<PathBuf>,
    },
    /// Compute registration metrics over a dataset split.
    Evaluate {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Which split to evaluate.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Trained checkpoint (mutually exclusive with --direct).
        #[arg(long, conflicts_with = "direct")]
        ckpt: Option<PathBuf>,
        /// Training-free mode using normalized patch descriptors.
        #[arg(long)]
        direct: bool,
        /// Integrate a velocity field for a fold-free deformation.
        #[arg(long)]
        diffeo: bool,
        /// Run configuration; defaults match the engine defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSON report path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Audit analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the correlation and warp kernels, emitting JSON.
    Bench {
        /// Search cube side lengths to time, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        radii: Vec<usize>,
        /// Cube edge length of the timed volumes.
        #[arg(long, default_value_t = 32)]
        dims: usize,
        /// Feature channels of the timed volumes.
        #[arg(long, default_value_t = 16)]
        channels: usize,
        /// Timing repetitions; the minimum is reported.
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Dataset split selector.
#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for recorr::synth::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => recorr::synth::Split::Train,
            SplitArg::Val => recorr::synth::Split::Val,
            SplitArg::Test => recorr::synth::Split::Test,
        }
    }
}

fn run(cli: Cli) -> recorr::Result<()> {
    match cli.command {
        Command::Gen { spec, out } => commands::gen(&spec, &out),
        Command::Train { config, data, out } => commands::train(&config, &data, &out),
        Command::Register {
            fixed,
            moving,
            ckpt,
            direct,
            diffeo,
            config,
            out,
            warped,
        } => commands::register(&commands::RegisterArgs {
            fixed,
            moving,
            ckpt,
            direct,
            diffeo,
            config,
            out,
            warped,
        }),
        Command::Evaluate {
            data,
            split,
            ckpt,
            direct,
            diffeo,
            config,
            report,
        } => commands::evaluate(&commands::EvaluateArgs {
            data,
            split: split.into(),
            ckpt,
            direct,
            diffeo,
            config,
            report,
        }),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Bench {
            radii,
            dims,
            channels,
            reps,
            seed,
        } => commands::bench(&radii, dims, channels, reps, seed),
    }
}

fn exit_code(err: &RecorrError) -> u8 {
    match err {
        RecorrError::Config(_) | RecorrError::InvalidArgument(_) => 1,
        RecorrError::Data(_) | RecorrError::Io(_) | RecorrError::ShapeMismatch { .. } => 2,
        RecorrError::NonFinite(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
