//! Library half of the `walmafa` command-line tool: every verb is a
//! function here so tests can drive it without spawning processes.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use walmafa::checkpoint::DType;
use walmafa::{FeatureMap, ParamStore};

pub mod error;
pub mod imageio;
pub mod infer;
pub mod metrics;
pub mod samples;
pub mod swap;
pub mod train;

pub use error::{CliError, CliResult};

/// Storage precision. Arithmetic is always f64; with `f32` the images,
/// parameters (after every update) and checkpoints are rounded to single
/// precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn round_map(self, map: FeatureMap) -> FeatureMap {
        match self {
            Precision::F32 => map.map(|v| v as f32 as f64),
            Precision::F64 => map,
        }
    }

    pub fn round_params(self, params: &mut ParamStore) {
        if self == Precision::F64 {
            return;
        }
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            for v in params.values_mut(&name).expect("name from the store") {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "walmafa", version, about = "Wavelet/Fourier low-light enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed for parameter initialization and crop sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Plain-text `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transplant wavelet bands or Fourier components from HIGH into LOW.
    Swap { low: PathBuf, high: PathBuf },
    /// Train on DATA/low/*.png and DATA/high/*.png.
    Train {
        data: PathBuf,
        /// Print every step, not only evaluations.
        #[arg(long)]
        verbose: bool,
    },
    /// Enhance PNG files or directories with a trained checkpoint.
    Infer {
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Reference PNG, or a directory of them matched by file name.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// PSNR and SSIM between same-named PNGs in two directories.
    Metrics { a: PathBuf, b: PathBuf },
}

impl Cli {
    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Swap { low, high } => {
            let report = swap::run_swap(low, high, &cli.out_or("swap_out"))?;
            swap::print_report(&report);
        }
        Command::Train { data, verbose } => {
            train::run_train(&train::TrainOptions {
                data: data.clone(),
                config: cli.config.clone(),
                out: cli.out_or("train_out"),
                seed: cli.seed,
                precision: cli.precision,
                verbose: *verbose,
            })?;
        }
        Command::Infer {
            checkpoint,
            inputs,
            reference,
        } => {
            let report = infer::run_infer(&infer::InferOptions {
                checkpoint: checkpoint.clone(),
                inputs: inputs.clone(),
                out: cli.out_or("infer_out"),
                reference: reference.clone(),
                config: cli.config.clone(),
                precision: cli.precision,
            })?;
            infer::print_report(&report);
        }
        Command::Metrics { a, b } => {
            let report = metrics::run_metrics(a, b, cli.out.as_deref(), cli.precision)?;
            metrics::print_report(&report);
        }
    }
    Ok(())
}
