//! Invariant suites run against freshly built toy problems.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::orthonormality_error;
use crate::par;
use crate::policies::{apply_alpha, apply_edit, EditPolicyConfig, Policy};
use crate::sensitivity::{aggregate, project_gradient, Reducer};
use crate::spectral::{containment_residuals, decompose, MagnitudeControl, SpectralUpdate};
use crate::toy::{build_toy_problem, finite_diff_sensitivity, ToyDims, ToyProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Orthonormality,
    Reconstruction,
    Containment,
    FiniteDifference,
    Energy,
    Noop,
    SpectrumOrdering,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Orthonormality,
        Suite::Reconstruction,
        Suite::Containment,
        Suite::FiniteDifference,
        Suite::Energy,
        Suite::Noop,
        Suite::SpectrumOrdering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Orthonormality => "orthonormality",
            Suite::Reconstruction => "reconstruction",
            Suite::Containment => "containment",
            Suite::FiniteDifference => "finite_difference",
            Suite::Energy => "energy",
            Suite::Noop => "noop",
            Suite::SpectrumOrdering => "spectrum_ordering",
        }
    }

    /// Bound on the suite's reported metric.
    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Orthonormality | Suite::Reconstruction => 1e-10,
            Suite::Containment => 1e-9,
            Suite::FiniteDifference => 1e-4,
            Suite::Energy | Suite::Noop => 1e-12,
            Suite::SpectrumOrdering => 0.0,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite {s:?}")))
    }
}

/// Deliberate defects used to check that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Swap the first two singular values after decomposition.
    SigmaOrder,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "sigma_order" => Ok(Fault::SigmaOrder),
            _ => Err(Error::InvalidArgument(format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub suites: Vec<Suite>,
    pub cases: usize,
    pub seed: u64,
    pub dims: ToyDims,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            suites: Suite::ALL.to_vec(),
            cases: 20,
            seed: 0,
            dims: ToyDims::new(48, 32, 8, 64),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: Suite,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed value of the suite's metric.
    pub max_error: f64,
    pub tolerance: f64,
    /// Named invariants that were violated, with the offending case.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

struct Case {
    index: usize,
    problem: ToyProblem,
    spec: SpectralUpdate,
}

fn build_case(opts: &VerifyOptions, index: usize) -> Result<Case> {
    let problem = build_toy_problem(opts.seed.wrapping_add(index as u64), opts.dims)?;
    let mut spec = decompose(&problem.factors, problem.scale, "toy")?;
    if opts.fault == Some(Fault::SigmaOrder) && spec.rank() >= 2 {
        spec.sigma.swap_rows(0, 1);
    }
    Ok(Case { index, problem, spec })
}

/// Per-case outcome: worst metric value and named violations.
type CaseOutcome = (f64, Vec<String>);

fn check(name: &str, case: usize, value: f64, tol: f64, failures: &mut Vec<String>) -> f64 {
    if !(value <= tol) {
        failures.push(format!("{name} (case {case}: {value:e} > {tol:e})"));
    }
    value
}

fn relative(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    let denom = b.norm();
    if denom == 0.0 {
        (a - b).norm()
    } else {
        (a - b).norm() / denom
    }
}

fn run_case(suite: Suite, case: &Case) -> Result<CaseOutcome> {
    let tol = suite.tolerance();
    let mut failures = Vec::new();
    let i = case.index;
    let spec = &case.spec;
    let worst = match suite {
        Suite::Orthonormality => {
            let e = orthonormality_error(&spec.u).max(orthonormality_error(&spec.v));
            check("orthonormal_bases", i, e, tol, &mut failures)
        }
        Suite::Reconstruction => {
            let target = case.problem.effective_update();
            let e = relative(&spec.reconstruct(), &target);
            check("reconstruction", i, e, tol, &mut failures)
        }
        Suite::Containment => {
            let proj = case.problem.per_example_projections(&spec.u, &spec.v)?;
            let profile = aggregate("toy", &proj, Reducer::MeanAbs)?.normalize();
            let mut worst = 0.0f64;
            for policy in Policy::ALL {
                let cfg = EditPolicyConfig {
                    seed: i as u64,
                    ..EditPolicyConfig::with_policy(policy)
                };
                let (edited, _) = apply_edit(spec, &profile, &cfg)?;
                let factors = edited.refactor()?;
                let delta = factors.effective_update(spec.scale);
                let (left, right) = containment_residuals(&spec.u, &spec.v, &delta);
                let e = left.max(right) / delta.norm().max(f64::MIN_POSITIVE);
                worst = worst.max(check(&format!("containment[{policy}]"), i, e, tol, &mut failures));
            }
            worst
        }
        Suite::FiniteDifference => {
            let g = project_gradient(&spec.u, &spec.v, &case.problem.calib_loss_and_grad().grad)?;
            let mut worst = 0.0f64;
            for k in 0..spec.rank() {
                let eps = 1e-5 * spec.sigma[k].max(1.0);
                let fd = finite_diff_sensitivity(&case.problem, spec, k, eps)?;
                let e = (fd - g[k]).abs() / g[k].abs().max(1e-12);
                worst = worst.max(check(&format!("finite_difference[k={k}]"), i, e, tol, &mut failures));
            }
            worst
        }
        Suite::Energy => {
            let proj = case.problem.per_example_projections(&spec.u, &spec.v)?;
            let profile = aggregate("toy", &proj, Reducer::MeanAbs)?.normalize();
            let before = spec.sigma.sum();
            let mut worst = 0.0f64;
            for policy in Policy::ALL {
                let (edited, _) = apply_edit(spec, &profile, &EditPolicyConfig::with_policy(policy))?;
                let e = (edited.sigma.sum() - before).abs() / before;
                worst = worst.max(check(&format!("l1_energy[{policy}]"), i, e, tol, &mut failures));
            }
            worst
        }
        Suite::Noop => {
            let r = spec.rank();
            let (same, _, _) = apply_alpha(spec, &vec![1.0; r], &MagnitudeControl::default())?;
            let exact = if same.sigma == spec.sigma { 0.0 } else { f64::INFINITY };
            let mut worst = check("unit_alpha_identity", i, exact, tol, &mut failures);
            let (scaled, _, _) = apply_alpha(spec, &vec![1.7; r], &MagnitudeControl::default())?;
            let e = (&scaled.sigma - &spec.sigma).amax() / spec.sigma.amax();
            worst = worst.max(check("uniform_alpha_identity", i, e, tol, &mut failures));
            worst
        }
        Suite::SpectrumOrdering => {
            let s = spec.sigma.as_slice();
            let rises = s.windows(2).map(|w| (w[1] - w[0]).max(0.0)).fold(0.0, f64::max);
            let negative = s.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
            check("sigma_descending", i, rises, tol, &mut failures);
            check("sigma_nonnegative", i, negative, tol, &mut failures);
            rises.max(negative)
        }
    };
    Ok((worst, failures))
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteResult> {
    let indices: Vec<usize> = (0..opts.cases).collect();
    let outcomes = par::try_map(&indices, |&i| run_case(suite, &build_case(opts, i)?))?;
    let mut max_error = 0.0f64;
    let mut failures = Vec::new();
    for (worst, f) in outcomes {
        max_error = max_error.max(worst);
        failures.extend(f);
    }
    Ok(SuiteResult {
        suite,
        passed: failures.is_empty(),
        cases: opts.cases,
        max_error,
        tolerance: suite.tolerance(),
        failures,
    })
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let suites = opts
        .suites
        .iter()
        .map(|&s| run_suite(s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        schema_version: crate::report::SCHEMA_VERSION,
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}
