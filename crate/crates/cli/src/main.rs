use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod config;
mod fail;
mod gradcheck;
mod restore;
mod train;
mod viz;

use fail::{config_error, exit_code};

/// Frequency-aware state-space rain removal: training, inference and
/// verification tools.
#[derive(Debug, Parser)]
#[command(name = "freqmamba", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on synthetic rain or a paired folder.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the checkpoint, log and resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restore one PPM image.
    Infer {
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-block branch outputs and attention maps as FTD1 files.
        #[arg(long)]
        dump_branches: Option<PathBuf>,
    },
    /// Mean Y-channel PSNR/SSIM over a folder with rainy/ and clean/ images.
    Eval {
        checkpoint: PathBuf,
        folder: PathBuf,
        /// Also write the restored images into this folder.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Also write the result table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exchange Fourier amplitude and phase between two images. Without
    /// inputs a synthetic rainy/clean pair is generated from the seed.
    SpectrumSwap {
        #[arg(requires = "image_b")]
        image_a: Option<PathBuf>,
        image_b: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Prefix for the written files.
        #[arg(long, default_value = "spectrum_swap")]
        out: PathBuf,
    },
    /// Write the frequency-band scan order of an HxW mosaic with k levels.
    ScanViz {
        height: usize,
        width: usize,
        levels: usize,
        #[arg(long, default_value = "scan")]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FREQMAMBA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(format!("FREQMAMBA_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, seed, out } => train::run(config.as_deref(), seed, out),
        Command::Infer {
            checkpoint,
            input,
            out,
            dump_branches,
        } => restore::infer(&checkpoint, &input, &out, dump_branches.as_deref()),
        Command::Eval {
            checkpoint,
            folder,
            out,
        } => restore::eval(&checkpoint, &folder, out.as_deref()),
        Command::Gradcheck { out } => gradcheck::run(out.as_deref()),
        Command::SpectrumSwap {
            image_a,
            image_b,
            seed,
            out,
        } => viz::spectrum_swap(image_a.as_deref().zip(image_b.as_deref()), seed.unwrap_or(0), &out),
        Command::ScanViz {
            height,
            width,
            levels,
            out,
        } => viz::scan_viz(height, width, levels, &out),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
