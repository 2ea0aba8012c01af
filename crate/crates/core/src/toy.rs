//! Synthetic regression problem with closed-form gradients.
//!
//! A frozen linear map `W` plus a LoRA update `s·B·A` is fit to targets
//! produced by a planted rank-r update `U diag(σ*) Vᵀ`. The stored factors
//! share the planted bases but carry a perturbed spectrum, so editing the
//! spectrum alone can drive the loss back to the noise floor.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{AdapterConfig, FactorPair, GradientDump, GradientMode, LoraAdapter, basis_checksum};
use crate::linalg::{gaussian_matrix, pairwise_sum, random_orthonormal};
use crate::policies::{apply_edit, EditPolicyConfig};
use crate::report::{EditReport, SCHEMA_VERSION};
use crate::sensitivity::{aggregate, Reducer};
use crate::spectral::{decompose, SpectralUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDims {
    pub d_out: usize,
    pub d_in: usize,
    pub r: usize,
    pub n_cal: usize,
}

impl ToyDims {
    pub fn new(d_out: usize, d_in: usize, r: usize, n_cal: usize) -> Self {
        Self { d_out, d_in, r, n_cal }
    }

    fn validate(&self) -> Result<()> {
        if self.r < 1 || self.d_out < self.r || self.d_in < self.r || self.n_cal < 1 {
            return Err(Error::InvalidArgument(format!(
                "toy dimensions need d_out, d_in >= r >= 1 and n_cal >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyOptions {
    /// Target noise standard deviation relative to the rms of the clean targets.
    pub noise: f64,
    /// Standard deviation of the log-normal spectrum perturbation.
    pub perturb_std: f64,
    /// LoRA scale `s = α/r` of the stored factors.
    pub scale: f64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            noise: 1e-3,
            perturb_std: 0.5,
            scale: 2.0,
        }
    }
}

impl ToyOptions {
    pub fn noiseless() -> Self {
        Self {
            noise: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub seed: u64,
    pub dims: ToyDims,
    pub w_frozen: DMatrix<f64>,
    pub factors: FactorPair,
    pub scale: f64,
    /// `n_cal × d_in`, one example per row.
    pub calib_inputs: DMatrix<f64>,
    /// `n_cal × d_out`.
    pub calib_targets: DMatrix<f64>,
    pub planted_u: DMatrix<f64>,
    pub planted_sigma: DVector<f64>,
    pub planted_v: DMatrix<f64>,
    /// Spectrum realized by `factors`, aligned with the planted bases.
    pub stored_sigma: DVector<f64>,
}

/// Loss, gradient and residuals at the problem's current update.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGradient {
    pub loss: f64,
    /// `G = ∂L/∂ΔW = (1/n)·Σ_i e_i x_iᵀ`.
    pub grad: DMatrix<f64>,
    /// `n_cal × d_out`, row `i` is `e_i`.
    pub residuals: DMatrix<f64>,
}

pub fn build_toy_problem(seed: u64, dims: ToyDims) -> Result<ToyProblem> {
    build_toy_problem_with(seed, dims, &ToyOptions::default())
}

pub fn build_toy_problem_with(seed: u64, dims: ToyDims, opts: &ToyOptions) -> Result<ToyProblem> {
    dims.validate()?;
    if !(opts.scale > 0.0 && opts.scale.is_finite()) || !(opts.noise >= 0.0) || !(opts.perturb_std >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid toy options {opts:?}")));
    }
    let ToyDims { d_out, d_in, r, n_cal } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let w_frozen = gaussian_matrix(&mut rng, d_out, d_in) / (d_in as f64).sqrt();
    let planted_u = random_orthonormal(&mut rng, d_out, r);
    let planted_v = random_orthonormal(&mut rng, d_in, r);
    let (ln_lo, ln_hi) = (0.1f64.ln(), 10f64.ln());
    let planted_sigma = DVector::from_fn(r, |_, _| rng.random_range(ln_lo..ln_hi).exp());
    let perturb = Normal::new(0.0, opts.perturb_std).expect("finite std");
    let stored_sigma = planted_sigma.map(|s| s * perturb.sample(&mut rng).exp());
    let calib_inputs = gaussian_matrix(&mut rng, n_cal, d_in);
    let noise = gaussian_matrix(&mut rng, n_cal, d_out);

    let planted = low_rank(&planted_u, planted_sigma.as_slice(), &planted_v);
    let clean = &calib_inputs * (&w_frozen + planted).transpose();
    let rms = (clean.norm_squared() / clean.len() as f64).sqrt();
    let calib_targets = clean + noise * (opts.noise * rms);

    let factors = split_factors(&planted_u, stored_sigma.as_slice(), &planted_v, opts.scale)?;
    Ok(ToyProblem {
        seed,
        dims,
        w_frozen,
        factors,
        scale: opts.scale,
        calib_inputs,
        calib_targets,
        planted_u,
        planted_sigma,
        planted_v,
        stored_sigma,
    })
}

fn low_rank(u: &DMatrix<f64>, sigma: &[f64], v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut us = u.clone();
    for (k, mut col) in us.column_iter_mut().enumerate() {
        col *= sigma[k];
    }
    us * v.transpose()
}

fn split_factors(u: &DMatrix<f64>, sigma: &[f64], v: &DMatrix<f64>, scale: f64) -> Result<FactorPair> {
    let roots: Vec<f64> = sigma.iter().map(|s| (s / scale).sqrt()).collect();
    let mut b = u.clone();
    for (k, mut col) in b.column_iter_mut().enumerate() {
        col *= roots[k];
    }
    let mut a = v.transpose();
    for (k, mut row) in a.row_iter_mut().enumerate() {
        row *= roots[k];
    }
    FactorPair::new(a, b)
}

impl ToyProblem {
    /// Same problem with the stored spectrum replaced (planted bases kept).
    pub fn with_stored_sigma(&self, sigma: &[f64]) -> Result<ToyProblem> {
        if sigma.len() != self.dims.r {
            return Err(Error::Shape(format!(
                "spectrum of length {} for rank {}",
                sigma.len(),
                self.dims.r
            )));
        }
        let mut out = self.clone();
        out.factors = split_factors(&self.planted_u, sigma, &self.planted_v, self.scale)?;
        out.stored_sigma = DVector::from_row_slice(sigma);
        Ok(out)
    }

    /// Same problem with different LoRA factors.
    pub fn with_factors(&self, factors: FactorPair) -> Result<ToyProblem> {
        if factors.d_out() != self.dims.d_out || factors.d_in() != self.dims.d_in {
            return Err(Error::Shape("factors do not fit the toy problem".into()));
        }
        let mut out = self.clone();
        out.factors = factors;
        Ok(out)
    }

    pub fn effective_update(&self) -> DMatrix<f64> {
        self.factors.effective_update(self.scale)
    }

    fn residuals(&self, delta: &DMatrix<f64>) -> DMatrix<f64> {
        &self.calib_inputs * (&self.w_frozen + delta).transpose() - &self.calib_targets
    }

    /// `L(ΔW) = (1/(2n))·Σ_i ‖(W + ΔW)x_i − y_i‖²`.
    pub fn loss_with_update(&self, delta: &DMatrix<f64>) -> f64 {
        loss_from_residuals(&self.residuals(delta))
    }

    pub fn loss(&self) -> f64 {
        self.loss_with_update(&self.effective_update())
    }

    /// Loss with `ΔW = U diag(σ) Vᵀ` rebuilt from a decomposition.
    pub fn loss_with_spectrum(&self, spec: &SpectralUpdate, sigma: &[f64]) -> f64 {
        self.loss_with_update(&low_rank(&spec.u, sigma, &spec.v))
    }

    pub fn calib_loss_and_grad(&self) -> ToyGradient {
        let residuals = self.residuals(&self.effective_update());
        let grad = residuals.transpose() * &self.calib_inputs / self.dims.n_cal as f64;
        ToyGradient {
            loss: loss_from_residuals(&residuals),
            grad,
            residuals,
        }
    }

    /// `n_cal × r` matrix of `u_kᵀ e_i x_iᵀ v_k = (E·U) ⊙ (X·V)`.
    pub fn per_example_projections(&self, u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.nrows() != self.dims.d_out || v.nrows() != self.dims.d_in || u.ncols() != v.ncols() {
            return Err(Error::Shape(format!(
                "bases {:?}/{:?} do not fit a {}×{} problem",
                u.shape(),
                v.shape(),
                self.dims.d_out,
                self.dims.d_in
            )));
        }
        let residuals = self.residuals(&self.effective_update());
        Ok((residuals * u).component_mul(&(&self.calib_inputs * v)))
    }

    /// Index pairing of each decomposition component with its planted one.
    fn planted_match(&self, spec: &SpectralUpdate) -> Vec<usize> {
        let overlap = spec.u.transpose() * &self.planted_u;
        (0..spec.rank())
            .map(|k| {
                (0..self.dims.r)
                    .max_by(|&i, &j| overlap[(k, i)].abs().total_cmp(&overlap[(k, j)].abs()))
                    .expect("rank >= 1")
            })
            .collect()
    }

    /// `α_k = σ*_k / σ_k`, the scaling that restores the planted spectrum.
    pub fn ideal_alpha(&self, spec: &SpectralUpdate) -> Vec<f64> {
        self.planted_match(spec)
            .into_iter()
            .zip(spec.sigma.iter())
            .map(|(j, s)| self.planted_sigma[j] / s)
            .collect()
    }
}

fn loss_from_residuals(residuals: &DMatrix<f64>) -> f64 {
    let per_example: Vec<f64> = residuals.row_iter().map(|e| e.norm_squared()).collect();
    pairwise_sum(&per_example) / (2.0 * residuals.nrows() as f64)
}

/// `(L(σ_k + ε) − L(σ_k − ε)) / (2ε)` with `ΔW = U diag(σ) Vᵀ`; `k` is 0-based.
pub fn finite_diff_sensitivity(problem: &ToyProblem, spec: &SpectralUpdate, k: usize, eps: f64) -> Result<f64> {
    if k >= spec.rank() {
        return Err(Error::InvalidArgument(format!("component {k} out of range for rank {}", spec.rank())));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut plus = spec.sigma.as_slice().to_vec();
    let mut minus = plus.clone();
    plus[k] += eps;
    minus[k] -= eps;
    Ok((problem.loss_with_spectrum(spec, &plus) - problem.loss_with_spectrum(spec, &minus)) / (2.0 * eps))
}

/// Outcome of [`run_end_to_end`].
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEnd {
    pub loss_before: f64,
    pub loss_after: f64,
    pub edited: FactorPair,
    pub report: EditReport,
}

pub const TOY_MODULE: &str = "toy.o_proj";

/// Decompose, profile with per-example projections (mean_abs), edit,
/// refactor, and recompute the loss.
pub fn run_end_to_end(problem: &ToyProblem, cfg: &EditPolicyConfig) -> Result<EndToEnd> {
    run_end_to_end_with(problem, cfg, Reducer::MeanAbs)
}

pub fn run_end_to_end_with(problem: &ToyProblem, cfg: &EditPolicyConfig, reducer: Reducer) -> Result<EndToEnd> {
    cfg.validate()?;
    let spec = decompose(&problem.factors, problem.scale, TOY_MODULE)?;
    let proj = problem.per_example_projections(&spec.u, &spec.v)?;
    let profile = aggregate(TOY_MODULE, &proj, reducer)?.normalize();
    let (edited_spec, entry) = apply_edit(&spec, &profile, cfg)?;
    // an identity edit keeps the original factors bit for bit
    let edited = if edited_spec.sigma == spec.sigma {
        problem.factors.clone()
    } else {
        edited_spec.refactor()?
    };
    let loss_before = problem.loss();
    let loss_after = problem.with_factors(edited.clone())?.loss();
    let report = EditReport {
        schema_version: SCHEMA_VERSION,
        policy: cfg.policy.to_string(),
        reducer,
        n_cal: problem.dims.n_cal,
        rank: problem.dims.r,
        num_layers: 1,
        num_families: 1,
        total_edited_scalars: problem.dims.r,
        key_prefix: None,
        config: cfg.clone(),
        modules: vec![entry],
    };
    Ok(EndToEnd {
        loss_before,
        loss_after,
        edited,
        report,
    })
}

/// Layout of a synthetic multi-layer adapter built from toy problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModelDims {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub r: usize,
    pub n_cal: usize,
}

impl Default for ToyModelDims {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 24,
            d_ff: 40,
            r: 4,
            n_cal: 16,
        }
    }
}

/// An adapter whose every module is an independent toy problem: `o_proj`
/// and `down_proj` write into `d_model`, `q_proj` is along for the ride.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub adapter: LoraAdapter,
    pub problems: BTreeMap<String, ToyProblem>,
    pub seed: u64,
}

pub const TOY_FAMILIES: [(&str, &str); 3] = [
    ("self_attn.q_proj", "q"),
    ("self_attn.o_proj", "o"),
    ("mlp.down_proj", "down"),
];

fn round_f32(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| x as f32 as f64)
}

pub fn build_toy_model(seed: u64, dims: ToyModelDims) -> Result<ToyModel> {
    let opts = ToyOptions::default();
    let mut problems = BTreeMap::new();
    let mut modules = BTreeMap::new();
    let mut index = 0u64;
    for layer in 0..dims.layers {
        for (family, _) in TOY_FAMILIES {
            let d_in = if family.ends_with("down_proj") { dims.d_ff } else { dims.d_model };
            let path = format!("model.layers.{layer}.{family}");
            let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index);
            index += 1;
            let problem = build_toy_problem_with(sub_seed, ToyDims::new(dims.d_model, d_in, dims.r, dims.n_cal), &opts)?;
            // stored at 32 bits, so keep the in-memory factors identical to the file
            let factors = FactorPair::new(round_f32(&problem.factors.a), round_f32(&problem.factors.b))?;
            let problem = problem.with_factors(factors.clone())?;
            modules.insert(path.clone(), factors);
            problems.insert(path, problem);
        }
    }
    let targets = TOY_FAMILIES.iter().map(|(f, _)| f.rsplit('.').next().unwrap().to_string()).collect();
    let config = AdapterConfig::new(dims.r, opts.scale * dims.r as f64, targets);
    Ok(ToyModel {
        adapter: LoraAdapter::new(config, modules)?,
        problems,
        seed,
    })
}

impl ToyModel {
    /// Full-matrix dump with `G` for every module.
    pub fn full_matrix_dump(&self) -> GradientDump {
        let modules = self
            .problems
            .iter()
            .map(|(path, p)| (path.clone(), p.calib_loss_and_grad().grad))
            .collect();
        GradientDump {
            mode: GradientMode::FullMatrix,
            n_cal: self.n_cal(),
            seed: self.seed,
            basis_checksum: None,
            example_start: None,
            modules,
        }
    }

    /// Projection dump against the adapter's own decompositions of the
    /// listed modules, stamped with their basis checksum.
    pub fn projection_dump(&self, decompositions: &[SpectralUpdate]) -> Result<GradientDump> {
        let mut modules = BTreeMap::new();
        for spec in decompositions {
            let problem = self
                .problems
                .get(&spec.module_path)
                .ok_or_else(|| Error::MissingModule(spec.module_path.clone()))?;
            modules.insert(spec.module_path.clone(), problem.per_example_projections(&spec.u, &spec.v)?);
        }
        let checksum = basis_checksum(decompositions.iter().map(|s| (s.module_path.as_str(), &*s.u, &*s.v)));
        Ok(GradientDump {
            mode: GradientMode::Projections,
            n_cal: self.n_cal(),
            seed: self.seed,
            basis_checksum: Some(checksum),
            example_start: Some(0),
            modules,
        })
    }

    fn n_cal(&self) -> usize {
        self.problems.values().next().map_or(0, |p| p.dims.n_cal)
    }

    /// Total loss over all modules with the given factors substituted.
    pub fn loss_with(&self, adapter: &LoraAdapter) -> Result<f64> {
        self.problems
            .iter()
            .map(|(path, p)| {
                let factors = adapter
                    .modules
                    .get(path)
                    .ok_or_else(|| Error::MissingModule(path.clone()))?;
                Ok(p.with_factors(factors.clone())?.loss())
            })
            .sum()
    }
}
