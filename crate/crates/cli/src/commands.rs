use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde_json::{json, Value};
use spectral_surgeon::alignment::{intra_layer_synergy, layer_heatmap};
use spectral_surgeon::io::{export_bases, GradientDump, LoraAdapter};
use spectral_surgeon::pipeline::{decompose_adapter, decompose_report, edit_adapter, ModuleFilter};
use spectral_surgeon::policies::{EditPolicyConfig, Policy};
use spectral_surgeon::report::SCHEMA_VERSION;
use spectral_surgeon::toy::{build_toy_model, build_toy_problem, run_end_to_end, ToyDims, ToyModelDims};
use spectral_surgeon::verify::{run_verify, Suite, VerifyOptions};
use spectral_surgeon::Error;

use crate::{AdapterArgs, AnalyzeArgs, DecomposeArgs, EditArgs, ToyDemoArgs, VerifyArgs};

pub const WEIGHTS_FILE: &str = "adapter_model.safetensors";
pub const CONFIG_FILE: &str = "adapter_config.json";

/// A failed run: exit code plus the JSON written to stderr.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    kind: String,
    message: String,
    details: Option<Value>,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "usage".into(),
            message: message.into(),
            details: None,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Error::io(path, e).into()
    }

    pub fn report(self) -> ExitCode {
        let mut error = json!({ "kind": self.kind, "message": self.message });
        if let Some(details) = self.details {
            error["details"] = details;
        }
        eprintln!("{}", json!({ "error": error }));
        ExitCode::from(self.code)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) => 2,
            _ => 1,
        };
        Self {
            code,
            kind: e.kind().to_string(),
            message: e.to_string(),
            details: None,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn adapter_paths(args: &AdapterArgs) -> (PathBuf, PathBuf) {
    let weights = if args.adapter.is_dir() {
        args.adapter.join(WEIGHTS_FILE)
    } else {
        args.adapter.clone()
    };
    let config = args.config.clone().unwrap_or_else(|| {
        weights
            .parent()
            .map_or_else(|| PathBuf::from(CONFIG_FILE), |p| p.join(CONFIG_FILE))
    });
    (weights, config)
}

fn load_adapter(args: &AdapterArgs) -> Result<LoraAdapter, Failure> {
    let (weights, config) = adapter_paths(args);
    Ok(LoraAdapter::load(&weights, &config)?)
}

/// Pretty JSON to `path`, or to stdout when no path is given.
fn emit_json(path: Option<&Path>, value: &Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n";
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

macro_rules! to_value {
    ($v:expr) => {
        serde_json::to_value($v).expect("reports serialize")
    };
}

pub fn decompose(args: DecomposeArgs) -> CmdResult {
    let adapter = load_adapter(&args.adapter)?;
    let filter = ModuleFilter::parse(&args.modules);
    let decomps = decompose_adapter(&adapter, &filter)?;
    export_bases(&decomps, &args.out_bases)?;
    let report = decompose_report(&adapter, &decomps);
    emit_json(args.report.as_deref(), &to_value!(&report))
}

pub fn edit(args: EditArgs) -> CmdResult {
    let cfg = args.policy.to_config();
    cfg.validate()?;
    let adapter = load_adapter(&args.adapter)?;
    let dump = GradientDump::load(&args.grads)?;
    let filter = ModuleFilter::parse(&args.modules);
    let (edited, report) = edit_adapter(&adapter, &dump, &cfg, &filter, args.policy.reducer)?;

    fs::create_dir_all(&args.out_adapter).map_err(|e| Failure::io(&args.out_adapter, e))?;
    edited.save(&args.out_adapter.join(WEIGHTS_FILE), &args.out_adapter.join(CONFIG_FILE))?;
    emit_json(args.report.as_deref(), &to_value!(&report))
}

pub fn analyze(args: AnalyzeArgs) -> CmdResult {
    let adapter = load_adapter(&args.adapter)?;
    let m = args.m.unwrap_or_else(|| adapter.rank());
    let heatmap = layer_heatmap(&adapter, &args.family, args.metric, m)?;
    let sidecar = heatmap.write(&args.out_csv)?;
    let mut summary = json!({
        "schema_version": SCHEMA_VERSION,
        "csv": args.out_csv,
        "sidecar": sidecar,
        "metric": heatmap.metric,
        "m": heatmap.m,
        "family": heatmap.module_family,
        "layers": heatmap.layer_ids,
        "d_model": heatmap.d_model,
        "baseline": heatmap.baseline(),
        "off_diagonal_mean": heatmap.off_diagonal_mean(),
    });
    if args.synergy {
        summary["synergy"] = to_value!(&intra_layer_synergy(&adapter, m)?);
    }
    emit_json(args.report.as_deref(), &summary)
}

pub fn verify(args: VerifyArgs) -> CmdResult {
    if args.cases == 0 {
        return Err(Failure::usage("--cases must be at least 1"));
    }
    let opts = VerifyOptions {
        suites: if args.suites.is_empty() {
            Suite::ALL.to_vec()
        } else {
            args.suites
        },
        cases: args.cases,
        seed: args.seed,
        fault: args.inject_fault,
        ..VerifyOptions::default()
    };
    let report = run_verify(&opts)?;
    emit_json(args.report.as_deref(), &to_value!(&report))?;
    if report.passed {
        return Ok(());
    }
    let failed: Vec<Value> = report
        .suites
        .iter()
        .filter(|s| !s.passed)
        .map(|s| json!({ "suite": s.suite, "failures": s.failures }))
        .collect();
    Err(Failure {
        code: 1,
        kind: "invariant_failure".into(),
        message: format!("{} suite(s) failed", failed.len()),
        details: Some(Value::Array(failed)),
    })
}

pub fn toy_demo(args: ToyDemoArgs) -> CmdResult {
    let dims = ToyDims::new(args.d_out, args.d_in, args.rank, args.n_cal);
    let problem = build_toy_problem(args.seed, dims)?;
    let spec = spectral_surgeon::spectral::decompose(&problem.factors, problem.scale, "toy")?;
    let planted = problem.with_stored_sigma(problem.planted_sigma.as_slice())?.loss();
    let mut runs = Vec::new();
    for policy in Policy::ALL {
        let cfg = EditPolicyConfig {
            seed: args.seed,
            ..EditPolicyConfig::with_policy(policy)
        };
        let out = run_end_to_end(&problem, &cfg)?;
        let entry = &out.report.modules[0];
        runs.push(json!({
            "policy": policy,
            "loss_after": out.loss_after,
            "alpha": entry.alpha,
            "energy_ratio": entry.energy_ratio,
        }));
    }
    let mut summary = json!({
        "schema_version": SCHEMA_VERSION,
        "seed": args.seed,
        "dims": { "d_out": dims.d_out, "d_in": dims.d_in, "r": dims.r, "n_cal": dims.n_cal },
        "sigma": spec.sigma.as_slice(),
        "loss_before": problem.loss(),
        "loss_planted": planted,
        "runs": runs,
    });
    if let Some(dir) = &args.emit {
        summary["emitted"] = emit_toy_files(dir, args.seed, args.n_cal)?;
    }
    emit_json(args.report.as_deref(), &summary)
}

/// Adapter directory, bases, and both dump flavours for a 2-layer toy model.
fn emit_toy_files(dir: &Path, seed: u64, n_cal: usize) -> Result<Value, Failure> {
    let model = build_toy_model(
        seed,
        ToyModelDims {
            n_cal,
            ..ToyModelDims::default()
        },
    )?;
    let adapter_dir = dir.join("adapter");
    fs::create_dir_all(&adapter_dir).map_err(|e| Failure::io(&adapter_dir, e))?;
    model.adapter.save(&adapter_dir.join(WEIGHTS_FILE), &adapter_dir.join(CONFIG_FILE))?;

    let decomps = decompose_adapter(&model.adapter, &ModuleFilter::default())?;
    let bases = dir.join("bases.safetensors");
    export_bases(&decomps, &bases)?;
    let full = dir.join("grads_full.safetensors");
    model.full_matrix_dump().save(&full)?;
    let proj = dir.join("grads_proj.safetensors");
    model.projection_dump(&decomps)?.save(&proj)?;
    Ok(json!({
        "adapter": adapter_dir,
        "bases": bases,
        "grads_full_matrix": full,
        "grads_projections": proj,
    }))
}
