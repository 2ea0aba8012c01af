//! `spectral-surgeon`: decompose, analyze and edit LoRA adapters.
//!
//! Exit codes: 0 success, 1 runtime/invariant/coverage failure, 2 usage error.
//! Failures print a single JSON object to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use spectral_surgeon::alignment::AlignmentMetric;
use spectral_surgeon::policies::{EditPolicyConfig, Policy};
use spectral_surgeon::spectral::{EnergyMode, MagnitudeControl};
use spectral_surgeon::verify::{Fault, Suite};
use spectral_surgeon::Reducer;

const THREADS_ENV: &str = "SPECTRAL_SURGEON_THREADS";

#[derive(Parser, Debug)]
#[command(name = "spectral-surgeon", version, about = "Training-free spectrum-only editing of LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decompose filtered modules, export their bases and a spectrum report.
    Decompose(DecomposeArgs),
    /// Reweight singular values from a gradient dump and write a new adapter.
    Edit(EditArgs),
    /// Cross-layer alignment heatmap (CSV + JSON sidecar).
    Analyze(AnalyzeArgs),
    /// Run the invariant suites on synthetic problems.
    Verify(VerifyArgs),
    /// Run every policy on a toy problem, optionally emitting its files.
    ToyDemo(ToyDemoArgs),
}

#[derive(Args, Debug)]
struct AdapterArgs {
    /// Adapter directory (with adapter_model.safetensors) or weights file.
    #[arg(long)]
    adapter: PathBuf,
    /// adapter_config.json; defaults to the one next to the weights.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[command(flatten)]
    adapter: AdapterArgs,
    /// Comma-separated module families to decompose ("*" for all).
    #[arg(long, default_value = "o_proj,down_proj")]
    modules: String,
    #[arg(long)]
    out_bases: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[command(flatten)]
    adapter: AdapterArgs,
    /// Gradient dump (full_matrix or projections).
    #[arg(long)]
    grads: PathBuf,
    /// Output directory for adapter_model.safetensors and adapter_config.json.
    #[arg(long)]
    out_adapter: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "o_proj,down_proj")]
    modules: String,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args, Debug)]
struct PolicyArgs {
    #[arg(long, value_parser = parse_policy)]
    policy: Policy,
    #[arg(long, default_value = "mean_abs", value_parser = parse_reducer)]
    reducer: Reducer,
    #[arg(long, default_value_t = 0.2)]
    core_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    noise_frac: f64,
    #[arg(long, default_value_t = 1)]
    min_core_k: usize,
    #[arg(long, default_value_t = 1.25)]
    amp_factor: f64,
    #[arg(long, default_value_t = 0.80)]
    sup_factor: f64,
    #[arg(long, default_value_t = 1.0)]
    mid_factor: f64,
    #[arg(long, default_value_t = 0.35)]
    smooth_temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    smooth_center_q: f64,
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    smooth_align_mid: bool,
    #[arg(long, default_value_t = 2.0)]
    eta_suppress: f64,
    #[arg(long, default_value_t = 0.2)]
    eta_enhance: f64,
    /// Step size of the symmetric grad_direction update.
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    grad_power: f64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    asymmetric_update: bool,
    #[arg(long, default_value_t = 0.0)]
    sigma_clip_min: f64,
    /// l1 or none.
    #[arg(long, default_value = "l1", value_parser = parse_energy)]
    preserve_energy: EnergyMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PolicyArgs {
    fn to_config(&self) -> EditPolicyConfig {
        EditPolicyConfig {
            policy: self.policy,
            core_frac: self.core_frac,
            noise_frac: self.noise_frac,
            min_core_k: self.min_core_k,
            amp_factor: self.amp_factor,
            sup_factor: self.sup_factor,
            mid_factor: self.mid_factor,
            smooth_temperature: self.smooth_temperature,
            smooth_center_q: self.smooth_center_q,
            smooth_align_mid: self.smooth_align_mid,
            eta_suppress: self.eta_suppress,
            eta_enhance: self.eta_enhance,
            eta: self.eta,
            asymmetric_update: self.asymmetric_update,
            grad_power: self.grad_power,
            seed: self.seed,
            magnitude: MagnitudeControl {
                sigma_clip_min: self.sigma_clip_min,
                energy_mode: self.preserve_energy,
            },
        }
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    adapter: AdapterArgs,
    #[arg(long, default_value = "o_proj")]
    family: String,
    /// u1_similarity or subspace_overlap.
    #[arg(long, default_value = "subspace_overlap", value_parser = parse_metric)]
    metric: AlignmentMetric,
    /// Subspace dimension; defaults to the adapter rank.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    out_csv: PathBuf,
    /// Also compute o_proj/down_proj overlap per layer.
    #[arg(long)]
    synergy: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suites to run (repeatable); all when omitted.
    #[arg(long = "suite", value_parser = parse_suite)]
    suites: Vec<Suite>,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Deliberately break an invariant to check that verify catches it.
    #[arg(long, hide = true, value_parser = parse_fault)]
    inject_fault: Option<Fault>,
}

#[derive(Args, Debug)]
struct ToyDemoArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    d_out: usize,
    #[arg(long, default_value_t = 32)]
    d_in: usize,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 128)]
    n_cal: usize,
    /// Write a multi-layer toy adapter, bases and gradient dumps here.
    #[arg(long)]
    emit: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: spectral_surgeon::Error| e.to_string())
}
fn parse_reducer(s: &str) -> Result<Reducer, String> {
    s.parse().map_err(|e: spectral_surgeon::Error| e.to_string())
}
fn parse_energy(s: &str) -> Result<EnergyMode, String> {
    s.parse().map_err(|e: spectral_surgeon::Error| e.to_string())
}
fn parse_metric(s: &str) -> Result<AlignmentMetric, String> {
    s.parse().map_err(|e: spectral_surgeon::Error| e.to_string())
}
fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: spectral_surgeon::Error| e.to_string())
}
fn parse_fault(s: &str) -> Result<Fault, String> {
    s.parse().map_err(|e: spectral_surgeon::Error| e.to_string())
}

fn configure_threads() -> Result<(), commands::Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| commands::Failure::usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::Failure::usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let failure = commands::Failure::usage(e.to_string().trim_end().to_string());
            return failure.report();
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Decompose(a) => commands::decompose(a),
        Command::Edit(a) => commands::edit(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Verify(a) => commands::verify(a),
        Command::ToyDemo(a) => commands::toy_demo(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => failure.report(),
    }
}
