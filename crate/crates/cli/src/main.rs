//! `cfsdcn` command-line tool.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cfsdcn", version = manifest::VERSION, about = "Snapshot spectral imaging simulation and reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskModeArg {
    Shifted,
    Replicate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PsnrModeArg {
    PerBand,
    WholeCube,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Hsc,
    Flat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormArg {
    Auto,
    Max,
    None,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a random binary coded aperture.
    GenMask {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a snapshot measurement of a cube.
    Simulate {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 2)]
        step: usize,
        /// none, gaussian:<sigma> or shot:<bits>
        #[arg(long, default_value = "none")]
        noise: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Undo the dispersion shift of a measurement.
    ShiftBack {
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long, default_value_t = 2)]
        step: usize,
        #[arg(long)]
        bands: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory with `train/` and `test/` cube files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint` when present.
        #[arg(long)]
        resume: bool,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct a cube from a measurement.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 2)]
        step: usize,
        #[arg(long, value_enum, default_value = "shifted")]
        mask_mode: MaskModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint (or the shift-back baseline) on test scenes.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of the analytical gradients.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Optional CSV copy of the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameters and GFLOPs of a model.
    Count {
        /// TOML run configuration.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// s, m, l or tiny.
        #[arg(long)]
        preset: Option<String>,
        /// Square spatial size of the reference input.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Write a procedural dataset of cubes.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        h: usize,
        #[arg(long, default_value_t = 64)]
        w: usize,
        #[arg(long, default_value_t = 8)]
        bands: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Train and evaluate one model per LCS kernel size.
    AblateLcs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,7,11")]
        kernels: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert an external cube to the native format, normalised to [0, 1].
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "hsc")]
        format: FormatArg,
        #[arg(long)]
        h: Option<usize>,
        #[arg(long)]
        w: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        /// u8, u16le, f32le or f64le
        #[arg(long, default_value = "f32le")]
        dtype: String,
        /// band-major or pixel-major
        #[arg(long, default_value = "band-major")]
        layout: String,
        #[arg(long, value_enum, default_value = "auto")]
        norm: NormArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "baseline")]
    pub ckpt: Option<PathBuf>,
    /// Score the scaled shift-back initialisation instead of a model.
    #[arg(long, conflicts_with = "ckpt")]
    pub baseline: bool,
    /// A directory of cubes or a single cube.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub step: usize,
    #[arg(long, default_value = "none")]
    pub noise: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "shifted")]
    pub mask_mode: MaskModeArg,
    #[arg(long, value_enum, default_value = "per-band")]
    pub psnr_mode: PsnrModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let reason: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error: kind=usage msg={}", reason.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
