use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use spectral_surgeon::io::container::tensor_bytes;
use spectral_surgeon::io::{AdapterConfig, FactorPair, GradientDump, LoraAdapter};
use spectral_surgeon::linalg::gaussian_matrix;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spectral-surgeon"));
    cmd.env_remove("SPECTRAL_SURGEON_THREADS");
    cmd
}

fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

/// Emits the 2-layer toy adapter plus dumps into a temp dir.
fn emitted() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["toy-demo", "--seed", "4", "--n-cal", "16", "--emit", s(dir.path()), "--report", s(&dir.path().join("toy.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.path().to_path_buf();
    (dir, path)
}

fn edit(dir: &Path, grads: &str, out: &str, extra: &[&str]) -> Output {
    let mut args: Vec<PathBuf> = vec![
        "edit".into(),
        "--adapter".into(),
        dir.join("adapter"),
        "--grads".into(),
        dir.join(grads),
        "--out-adapter".into(),
        dir.join(out),
        "--report".into(),
        dir.join(format!("{out}.json")),
    ];
    args.extend(extra.iter().map(PathBuf::from));
    run(&args)
}

#[test]
fn edit_isolates_unfiltered_modules() {
    let (_t, dir) = emitted();
    let out = edit(&dir, "grads_full.safetensors", "edited", &["--policy", "grad_direction"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let before = fs::read(dir.join("adapter/adapter_model.safetensors")).unwrap();
    let after = fs::read(dir.join("edited/adapter_model.safetensors")).unwrap();
    let adapter = LoraAdapter::load(
        &dir.join("adapter/adapter_model.safetensors"),
        &dir.join("adapter/adapter_config.json"),
    )
    .unwrap();
    let mut edited_count = 0;
    for path in adapter.modules.keys() {
        for suffix in ["lora_A.weight", "lora_B.weight"] {
            let key = format!("{path}.{suffix}");
            let (a, b) = (tensor_bytes(&before, &key).unwrap(), tensor_bytes(&after, &key).unwrap());
            if path.ends_with("q_proj") {
                assert_eq!(a, b, "{key} changed");
            } else {
                assert_ne!(a, b, "{key} unchanged");
                edited_count += 1;
            }
        }
    }
    assert_eq!(edited_count, 8);
    assert_eq!(
        fs::read(dir.join("adapter/adapter_config.json")).unwrap(),
        fs::read(dir.join("edited/adapter_config.json")).unwrap()
    );
}

#[test]
fn l1_energy_ratios_are_one() {
    let (_t, dir) = emitted();
    for policy in ["abs_select", "smooth_abs", "random_index", "grad_direction"] {
        let out = edit(&dir, "grads_proj.safetensors", policy, &["--policy", policy, "--preserve-energy", "l1"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let report: Value = serde_json::from_slice(&fs::read(dir.join(format!("{policy}.json"))).unwrap()).unwrap();
        assert_eq!(report["schema_version"], 1);
        assert_eq!(report["policy"], policy);
        assert_eq!(report["total_edited_scalars"], 2 * 2 * 4);
        for m in report["modules"].as_array().unwrap() {
            assert!((m["energy_ratio"].as_f64().unwrap() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn random_index_reruns_are_byte_identical() {
    let (_t, dir) = emitted();
    let flags = ["--policy", "random_index", "--seed", "7"];
    assert!(edit(&dir, "grads_full.safetensors", "run1", &flags).status.success());
    let out = bin()
        .env("SPECTRAL_SURGEON_THREADS", "1")
        .args([
            "edit",
            "--adapter",
            s(&dir.join("adapter")),
            "--grads",
            s(&dir.join("grads_full.safetensors")),
            "--out-adapter",
            s(&dir.join("run2")),
            "--report",
            s(&dir.join("run2.json")),
        ])
        .args(flags)
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["run1/adapter_model.safetensors", "run1.json"] {
        let other = f.replace("run1", "run2");
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(dir.join(other)).unwrap(), "{f}");
    }
}

#[test]
fn coverage_and_matching_errors() {
    let (_t, dir) = emitted();
    let out = edit(&dir, "grads_full.safetensors", "x", &["--policy", "abs_select", "--modules", "gate_proj"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "no_modules_matched");
    assert!(stderr_json(&out)["error"]["message"].as_str().unwrap().contains("no modules matched"));

    let mut dump = GradientDump::load(&dir.join("grads_full.safetensors")).unwrap();
    dump.modules.remove("model.layers.1.self_attn.o_proj");
    dump.save(&dir.join("partial.safetensors")).unwrap();
    let out = edit(&dir, "partial.safetensors", "y", &["--policy", "abs_select"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "missing_module");
    assert!(!dir.join("y").exists());

    let out = run(&["decompose", "--adapter", s(&dir.join("adapter")), "--out-bases", s(&dir.join("b")), "--modules", "k_proj"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "no_modules_matched");
}

#[test]
fn checksum_mismatch_is_reported() {
    let (_t, dir) = emitted();
    let mut dump = GradientDump::load(&dir.join("grads_proj.safetensors")).unwrap();
    dump.basis_checksum = Some(dump.basis_checksum.unwrap().wrapping_add(1));
    dump.save(&dir.join("stale.safetensors")).unwrap();
    let out = edit(&dir, "stale.safetensors", "z", &["--policy", "smooth_abs"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "checksum_mismatch");
}

#[test]
fn usage_errors_exit_two() {
    let (_t, dir) = emitted();
    let out = edit(&dir, "grads_full.safetensors", "u", &["--policy", "magic"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");

    let out = edit(&dir, "grads_full.safetensors", "u", &[]);
    assert_eq!(out.status.code(), Some(2));

    let out = edit(&dir, "grads_full.safetensors", "u", &["--policy", "abs_select", "--core-frac", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "invalid_argument");

    let out = bin().env("SPECTRAL_SURGEON_THREADS", "0").args(["verify", "--cases", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn decompose_exports_four_triples() {
    let (_t, dir) = emitted();
    let bases = dir.join("b.safetensors");
    let report = dir.join("d.json");
    let out = run(&["decompose", "--adapter", s(&dir.join("adapter")), "--out-bases", s(&bases), "--report", s(&report)]);
    assert!(out.status.success());
    let triples = spectral_surgeon::io::load_bases(&bases).unwrap();
    assert_eq!(triples.len(), 4);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["total_edited_scalars"], 16);
    assert_eq!(r["num_layers"], 2);
    assert_eq!(r["modules"].as_array().unwrap().len(), 4);
    assert_eq!(fs::read(&bases).unwrap(), fs::read(dir.join("bases.safetensors")).unwrap());
}

fn write_adapter(dir: &Path, layers: usize, d_out: usize, d_in: usize, r: usize, same: bool, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = (gaussian_matrix(&mut rng, r, d_in), gaussian_matrix(&mut rng, d_out, r));
    let mut modules = BTreeMap::new();
    for l in 0..layers {
        let (a, b) = if same {
            shared.clone()
        } else {
            (gaussian_matrix(&mut rng, r, d_in), gaussian_matrix(&mut rng, d_out, r))
        };
        modules.insert(format!("model.layers.{l}.self_attn.o_proj"), FactorPair::new(a, b).unwrap());
    }
    let adapter = LoraAdapter::new(AdapterConfig::new(r, r as f64, vec!["o_proj".into()]), modules).unwrap();
    let out = dir.join(format!("adapter_{layers}_{d_out}_{same}"));
    fs::create_dir_all(&out).unwrap();
    adapter.save(&out.join("adapter_model.safetensors"), &out.join("adapter_config.json")).unwrap();
    out
}

fn analyze(adapter: &Path, csv: &Path, m: &str) -> Value {
    let out = run(&["analyze", "--adapter", s(adapter), "--family", "o_proj", "--m", m, "--out-csv", s(csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn analyze_identical_layers_give_ones() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = write_adapter(dir.path(), 3, 32, 16, 4, true, 1);
    let csv = dir.path().join("h.csv");
    analyze(&adapter, &csv, "4");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,0,1,2"));
    for line in lines {
        assert!(line.split(',').skip(1).all(|v| v == "1"), "{line}");
    }
}

#[test]
fn analyze_random_layers_near_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = write_adapter(dir.path(), 16, 512, 8, 4, false, 2);
    let csv = dir.path().join("h.csv");
    analyze(&adapter, &csv, "4");
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let off: Vec<f64> = (0..16).flat_map(|i| (i + 1..16).map(move |j| (i, j))).map(|(i, j)| rows[i][j]).collect();
    let n = off.len() as f64;
    let mean = off.iter().sum::<f64>() / n;
    let sd = (off.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // pairs share layers, so allow a wider band than independent sampling would need
    assert!((mean - 4.0 / 512.0).abs() <= 3.0 * sd / (16.0f64).sqrt(), "mean {mean}");
}

#[test]
fn analyze_sidecar_records_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = write_adapter(dir.path(), 2, 4096, 16, 16, false, 3);
    let csv = dir.path().join("wall.csv");
    let summary = analyze(&adapter, &csv, "16");
    let side: Value = serde_json::from_str(fs::read_to_string(dir.path().join("wall.json")).unwrap().trim()).unwrap();
    assert_eq!(side["baseline"], 0.00390625);
    assert_eq!(side["m"], 16);
    assert_eq!(side["family"], "o_proj");
    assert_eq!(side["metric"], "subspace_overlap");
    assert_eq!(side["layers"], serde_json::json!([0, 1]));
    assert_eq!(summary["baseline"], 0.00390625);

    let out = run(&["analyze", "--adapter", s(&adapter), "--family", "o_proj", "--m", "17", "--out-csv", s(&csv)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["analyze", "--adapter", s(&adapter), "--family", "down_proj", "--out-csv", s(&csv)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "family_absent");
}

#[test]
fn verify_default_scope_passes() {
    let out = run(&["verify"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"].as_array().unwrap().len(), 7);
    let fd = report["suites"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["suite"] == "finite_difference")
        .unwrap();
    assert!(fd["max_error"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn verify_catches_injected_sigma_order_fault() {
    let out = run(&["verify", "--cases", "2", "--inject-fault", "sigma-order"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "invariant_failure");
    let details = err["error"]["details"].as_array().unwrap();
    assert!(details.iter().any(|d| d["suite"] == "spectrum_ordering"
        && d["failures"][0].as_str().unwrap().starts_with("sigma_descending")));
}
