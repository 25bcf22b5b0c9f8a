// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `repscope` command line.
//!
//! Exit status is 0 on success, 1 on a data or validation error (a JSON
//! error object is written to stderr) and 2 on a usage error.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::actstore::{MaskKind, DEFAULT_ROW_SUM_TOL};
use crate::error::Error;
use crate::spectra::HeadMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser, Serialize)]
#[command(name = "repscope", version, about = "Concept directions, LAT scans and attention spectra")]
pub struct Cli {
    /// Seed for every random draw; required by the `simulate` family.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Allowed |row sum − 1| (and negativity) for attention matrices.
    #[arg(long, global = true, default_value_t = DEFAULT_ROW_SUM_TOL)]
    pub row_sum_tol: f64,

    /// Write errors as JSON only, without the human-readable line.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub json_errors: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Check a RAD file and report attention stochasticity.
    Validate(ValidateArgs),
    /// Fit and sign-calibrate per-layer concept directions.
    Directions(DirectionsArgs),
    /// Token-wise concept scores for the prompts of a dump.
    Score(ScoreArgs),
    /// Layer × token scan of one prompt, as SVG and/or CSV.
    Scan(ScanArgs),
    /// Spectral report of the attention matrices of one prompt.
    Spectra(SpectraArgs),
    /// Synthetic attention stacks, sweeps and planted datasets.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    pub file: PathBuf,
    /// Also write the report (with provenance) to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DirectionsArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub concept: String,
    /// Mean-center the differences before PCA.
    #[arg(long)]
    pub center: bool,
    /// Rescale each difference to unit norm before PCA.
    #[arg(long)]
    pub normalize_diffs: bool,
    /// Directions RAD file; the sidecar goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub dirs: PathBuf,
    /// Prompts to score (repeatable); defaults to every prompt with hidden states.
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    /// `top-third`, `layer:N` or `mean:A-B`.
    #[arg(long, default_value = "top-third")]
    pub layer_agg: String,
    /// Baseline RAD whose prompts give per-layer z-score statistics.
    #[arg(long)]
    pub normalize: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScanArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub dirs: PathBuf,
    /// Prompt to scan; defaults to the first prompt with hidden states.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub normalize: Option<PathBuf>,
    /// SVG heatmap path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadModeArg {
    Averaged,
    PerHead,
}

impl From<HeadModeArg> for HeadMode {
    fn from(h: HeadModeArg) -> Self {
        match h {
            HeadModeArg::Averaged => HeadMode::Averaged,
            HeadModeArg::PerHead => HeadMode::PerHead,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SpectraArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, value_enum, default_value = "averaged")]
    pub head_mode: HeadModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskArg {
    Full,
    Causal,
}

impl From<MaskArg> for MaskKind {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Full => MaskKind::Full,
            MaskArg::Causal => MaskKind::Causal,
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(args_conflicts_with_subcommands = true)]
pub struct SimulateArgs {
    #[command(subcommand)]
    pub command: Option<SimulateCommand>,
    #[command(flatten)]
    pub trace: TraceArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TraceArgs {
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Width of the value matrix V.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    /// `constant:x`, `geometric:start,end` or `list:t0,t1,…`.
    #[arg(long, default_value = "geometric:2.0,0.25")]
    pub tau_schedule: String,
    #[arg(long, value_enum, default_value = "full")]
    pub mask: MaskArg,
    /// Use a fresh matrix per layer instead of repeating layer 0's.
    #[arg(long)]
    pub per_layer_matrices: bool,
    /// Trace CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the attention stack and outputs as a RAD dump.
    #[arg(long)]
    pub rad: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateCommand {
    /// Mean sparsity and gap over a temperature sweep.
    Sweep(SweepArgs),
    /// Planted-concept activation dataset as a RAD dump.
    Planted(PlantedArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2,10")]
    pub taus: Vec<f64>,
    /// Number of seeds, `seed, seed+1, …`.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PlantedArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, default_value_t = 4)]
    pub truncations: usize,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Draw an independent direction per layer.
    #[arg(long)]
    pub per_layer_directions: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Why a run stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(Error),
    /// Validation ran to completion and found violations.
    Invalid { violations: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) | Failure::Invalid { .. } => EXIT_DATA,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let (code, message) = match self {
            Failure::Usage(m) => ("usage".to_string(), m.clone()),
            Failure::Data(e) => (e.code().to_string(), e.to_string()),
            Failure::Invalid { violations } => (
                "validation_failed".to_string(),
                format!("{violations} attention matrices violate the tolerance"),
            ),
        };
        serde_json::json!({ "error": { "code": code, "message": message } })
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), Failure> {
    if !(cli.row_sum_tol > 0.0) {
        return Err(Failure::Usage("--row-sum-tol must be positive".into()));
    }
    match &cli.command {
        Command::Validate(a) => commands::validate(cli, a),
        Command::Directions(a) => commands::directions(cli, a),
        Command::Score(a) => commands::score(cli, a),
        Command::Scan(a) => commands::scan(cli, a),
        Command::Spectra(a) => commands::spectra(cli, a),
        Command::Simulate(a) => commands::simulate(cli, a),
    }
}

/// Parses `std::env::args`, runs, reports failures, and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            if !cli.json_errors {
                match &f {
                    Failure::Usage(m) => eprintln!("error: {m}"),
                    Failure::Data(e) => eprintln!("error: {e}"),
                    Failure::Invalid { violations } => {
                        eprintln!("error: {violations} attention matrices failed validation")
                    }
                }
            }
            eprintln!("{}", f.to_json());
            f.exit_code()
        }
    }
}
