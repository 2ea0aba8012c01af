//! Edit policies: per-component scalings `α` with `σ'_k = α_k σ_k`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fnv1a64, quantile_sorted};
use crate::report::{EditWarning, ModuleEdit};
use crate::sensitivity::SensitivityProfile;
use crate::spectral::{apply_magnitude_control, ControlledSpectrum, MagnitudeControl, SpectralUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Three-level gate from a hard top/bottom ranking of magnitudes.
    AbsSelect,
    /// Sigmoid gate on normalized magnitudes.
    SmoothAbs,
    /// Same counts as `AbsSelect`, indices drawn at random.
    RandomIndex,
    /// Multiplicative step against the signed sensitivity.
    GradDirection,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::AbsSelect,
        Policy::SmoothAbs,
        Policy::RandomIndex,
        Policy::GradDirection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::AbsSelect => "abs_select",
            Policy::SmoothAbs => "smooth_abs",
            Policy::RandomIndex => "random_index",
            Policy::GradDirection => "grad_direction",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown policy {s:?}")))
    }
}

/// Every knob of the four policies plus magnitude control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPolicyConfig {
    pub policy: Policy,
    pub core_frac: f64,
    pub noise_frac: f64,
    pub min_core_k: usize,
    pub amp_factor: f64,
    pub sup_factor: f64,
    pub mid_factor: f64,
    pub smooth_temperature: f64,
    pub smooth_center_q: f64,
    pub smooth_align_mid: bool,
    pub eta_suppress: f64,
    pub eta_enhance: f64,
    /// Step size of the symmetric grad_direction update.
    pub eta: f64,
    pub asymmetric_update: bool,
    /// Exponent applied to the positive part in the asymmetric update.
    pub grad_power: f64,
    pub seed: u64,
    pub magnitude: MagnitudeControl,
}

impl Default for EditPolicyConfig {
    fn default() -> Self {
        Self {
            policy: Policy::AbsSelect,
            core_frac: 0.2,
            noise_frac: 0.2,
            min_core_k: 1,
            amp_factor: 1.25,
            sup_factor: 0.80,
            mid_factor: 1.0,
            smooth_temperature: 0.35,
            smooth_center_q: 0.5,
            smooth_align_mid: false,
            eta_suppress: 2.0,
            eta_enhance: 0.2,
            eta: 0.5,
            asymmetric_update: true,
            grad_power: 1.0,
            seed: 0,
            magnitude: MagnitudeControl::default(),
        }
    }
}

impl EditPolicyConfig {
    pub fn with_policy(policy: Policy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(0.0..=1.0).contains(&self.core_frac) {
            return bad("core_frac must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise_frac) {
            return bad("noise_frac must lie in [0, 1]");
        }
        if !(self.smooth_temperature > 0.0 && self.smooth_temperature.is_finite()) {
            return bad("smooth_temperature must be positive");
        }
        if !(self.smooth_center_q > 0.0 && self.smooth_center_q < 1.0) {
            return bad("smooth_center_q must lie in (0, 1)");
        }
        let finite = [
            self.amp_factor,
            self.sup_factor,
            self.mid_factor,
            self.eta_suppress,
            self.eta_enhance,
            self.eta,
            self.magnitude.sigma_clip_min,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("gate factors, step sizes and sigma_clip_min must be finite");
        }
        if !(self.grad_power >= 0.0 && self.grad_power.is_finite()) {
            return bad("grad_power must be a finite nonnegative number");
        }
        Ok(())
    }
}

fn round_half_away(x: f64) -> usize {
    // f64::round rounds half away from zero
    x.round().max(0.0) as usize
}

/// `k_core = min(r, max(⌊r·p⌉, k_min))`, `k_noise = min(r − k_core, ⌊r·q⌉)`.
pub fn selection_counts(r: usize, core_frac: f64, noise_frac: f64, min_core_k: usize) -> (usize, usize) {
    let k_core = r.min(round_half_away(r as f64 * core_frac).max(min_core_k));
    let k_noise = (r - k_core).min(round_half_away(r as f64 * noise_frac));
    (k_core, k_noise)
}

/// α together with the hard-selection counts that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeLevelAlpha {
    pub alpha: Vec<f64>,
    pub k_core: usize,
    pub k_noise: usize,
}

fn three_level(r: usize, core: &[usize], noise: &[usize], cfg: &EditPolicyConfig) -> Vec<f64> {
    let mut alpha = vec![cfg.mid_factor; r];
    for &i in core {
        alpha[i] = cfg.amp_factor;
    }
    for &i in noise {
        alpha[i] = cfg.sup_factor;
    }
    alpha
}

/// Top-`k_core` magnitudes get `amp_factor`, bottom-`k_noise` of the rest get
/// `sup_factor`, everything else `mid_factor`. Ties go to the lower index in
/// both rankings. A degenerate profile yields `mid_factor` everywhere.
pub fn alpha_abs_select(x: &[f64], degenerate: bool, cfg: &EditPolicyConfig) -> ThreeLevelAlpha {
    let r = x.len();
    let (k_core, k_noise) = selection_counts(r, cfg.core_frac, cfg.noise_frac, cfg.min_core_k);
    if degenerate {
        return ThreeLevelAlpha {
            alpha: vec![cfg.mid_factor; r],
            k_core,
            k_noise,
        };
    }
    let mut desc: Vec<usize> = (0..r).collect();
    desc.sort_by(|&i, &j| x[j].total_cmp(&x[i]));
    let (core, rest) = desc.split_at(k_core);
    let mut asc = rest.to_vec();
    asc.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
    ThreeLevelAlpha {
        alpha: three_level(r, core, &asc[..k_noise], cfg),
        k_core,
        k_noise,
    }
}

/// Per-module RNG: the 256-bit ChaCha key is the seed followed by the
/// FNV-1a hash of the module path, so each module has its own stream no
/// matter which order modules are processed in.
pub fn module_rng(seed: u64, module_path: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(module_path.as_bytes()).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Random control: the counts of [`alpha_abs_select`] with indices drawn
/// uniformly without replacement.
pub fn alpha_random_index(r: usize, cfg: &EditPolicyConfig, module_path: &str) -> ThreeLevelAlpha {
    let (k_core, k_noise) = selection_counts(r, cfg.core_frac, cfg.noise_frac, cfg.min_core_k);
    let mut rng = module_rng(cfg.seed, module_path);
    let mut idx: Vec<usize> = (0..r).collect();
    let (picked, _) = idx.partial_shuffle(&mut rng, k_core + k_noise);
    let (core, noise) = picked.split_at(k_core);
    ThreeLevelAlpha {
        alpha: three_level(r, core, noise, cfg),
        k_core,
        k_noise,
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothGate {
    pub alpha: Vec<f64>,
    /// Gate center after any mid alignment.
    pub center: f64,
    pub temperature: f64,
    /// Shaping was skipped and `alpha ≡ mid_factor`.
    pub degenerate: bool,
    pub align_mid_ignored: bool,
}

/// `α_k = γ_sup + (γ_amp − γ_sup)·sigmoid((x_k − μ)/τ)` with `μ = Q_c(x)` and
/// `τ = T·(Q_{1−core_frac}(x) − Q_{noise_frac}(x))`.
pub fn alpha_smooth_abs(x: &[f64], degenerate: bool, cfg: &EditPolicyConfig) -> SmoothGate {
    let r = x.len();
    let flat = |center, temperature, align_mid_ignored| SmoothGate {
        alpha: vec![cfg.mid_factor; r],
        center,
        temperature,
        degenerate: true,
        align_mid_ignored,
    };
    if degenerate || r == 0 {
        return flat(0.0, 0.0, false);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[r - 1]);
    if hi - lo < 1e-8 * hi.max(1.0) {
        return flat(0.0, 0.0, false);
    }

    let (mut q_lo, mut q_hi) = (cfg.noise_frac, 1.0 - cfg.core_frac);
    if q_hi <= q_lo {
        (q_lo, q_hi) = (0.25, 0.75);
    }
    let mut center = quantile_sorted(&sorted, cfg.smooth_center_q);
    let temperature =
        cfg.smooth_temperature * (quantile_sorted(&sorted, q_hi) - quantile_sorted(&sorted, q_lo));
    if !(temperature > 0.0) {
        return flat(center, temperature, false);
    }

    let (amp, sup, mid) = (cfg.amp_factor, cfg.sup_factor, cfg.mid_factor);
    let mut align_mid_ignored = false;
    if cfg.smooth_align_mid {
        let t = (mid - sup) / (amp - sup);
        if t > 0.0 && t < 1.0 && t.is_finite() {
            center -= temperature * (t / (1.0 - t)).ln();
        } else {
            align_mid_ignored = true;
        }
    }
    let alpha = x
        .iter()
        .map(|&xk| sup + (amp - sup) * sigmoid((xk - center) / temperature))
        .collect();
    SmoothGate {
        alpha,
        center,
        temperature,
        degenerate: false,
        align_mid_ignored,
    }
}

/// Signed multiplicative update `α_k = exp(−g_eff_k)`.
///
/// Asymmetric: `g_eff = η_sup·(g⁺)^p + η_amp·g⁻` with `g⁺ = max(g̃, 0)` and
/// `g⁻ = min(g̃, 0)`. Symmetric: `g_eff = η·g̃`.
pub fn alpha_grad_direction(g_tilde: &[f64], cfg: &EditPolicyConfig) -> Vec<f64> {
    g_tilde
        .iter()
        .map(|&g| {
            let g_eff = if cfg.asymmetric_update {
                let pos = if g > 0.0 { g.powf(cfg.grad_power) } else { 0.0 };
                let neg = g.min(0.0);
                cfg.eta_suppress * pos + cfg.eta_enhance * neg
            } else {
                cfg.eta * g
            };
            (-g_eff).exp()
        })
        .collect()
}

/// `σ' = α ⊙ σ` followed by magnitude control. Bases are shared with `spec`.
pub fn apply_alpha(
    spec: &SpectralUpdate,
    alpha: &[f64],
    magnitude: &MagnitudeControl,
) -> Result<(SpectralUpdate, ControlledSpectrum, Vec<f64>)> {
    if alpha.len() != spec.rank() {
        return Err(Error::RankMismatch {
            module: spec.module_path.clone(),
            expected: spec.rank(),
            found: alpha.len(),
        });
    }
    let edited: Vec<f64> = alpha.iter().zip(spec.sigma.iter()).map(|(a, s)| a * s).collect();
    let controlled = apply_magnitude_control(spec.sigma.as_slice(), &edited, magnitude)?;
    Ok((spec.with_sigma(controlled.sigma.clone()), controlled, edited))
}

/// Computes the policy's α for one module and applies it.
pub fn apply_edit(
    spec: &SpectralUpdate,
    profile: &SensitivityProfile,
    cfg: &EditPolicyConfig,
) -> Result<(SpectralUpdate, ModuleEdit)> {
    if profile.module_path != spec.module_path {
        return Err(Error::InvalidArgument(format!(
            "profile for {} applied to {}",
            profile.module_path, spec.module_path
        )));
    }
    if profile.rank() != spec.rank() {
        return Err(Error::RankMismatch {
            module: spec.module_path.clone(),
            expected: spec.rank(),
            found: profile.rank(),
        });
    }

    let mut warnings = Vec::new();
    if profile.degenerate {
        warnings.push(EditWarning::DegenerateProfile);
    }
    let x = profile.x_normalized.as_slice();
    let (alpha, k_core, k_noise) = match cfg.policy {
        Policy::AbsSelect => {
            let sel = alpha_abs_select(x, profile.degenerate, cfg);
            (sel.alpha, Some(sel.k_core), Some(sel.k_noise))
        }
        Policy::RandomIndex => {
            let sel = alpha_random_index(spec.rank(), cfg, &spec.module_path);
            (sel.alpha, Some(sel.k_core), Some(sel.k_noise))
        }
        Policy::SmoothAbs => {
            let gate = alpha_smooth_abs(x, profile.degenerate, cfg);
            if gate.degenerate && !profile.degenerate {
                warnings.push(EditWarning::SmoothDegenerate);
            }
            if gate.align_mid_ignored {
                warnings.push(EditWarning::AlignMidIgnored);
            }
            (gate.alpha, None, None)
        }
        Policy::GradDirection => (alpha_grad_direction(profile.g_tilde.as_slice(), cfg), None, None),
    };

    let (edited, controlled, sigma_edited) = apply_alpha(spec, &alpha, &cfg.magnitude)?;
    if controlled.zero_mass {
        warnings.push(EditWarning::ZeroMass);
    }
    let before: f64 = spec.sigma.sum();
    let after: f64 = edited.sigma.sum();
    let energy_ratio = if before > 0.0 { after / before } else { 1.0 };
    let entry = ModuleEdit {
        module_path: spec.module_path.clone(),
        alpha,
        sigma_before: spec.sigma.as_slice().to_vec(),
        sigma_edited,
        sigma_after: edited.sigma.as_slice().to_vec(),
        k_core,
        k_noise,
        energy_ratio_pre: controlled.energy_ratio_pre,
        energy_ratio,
        warnings,
    };
    Ok((edited, entry))
}

/// Convenience for tests and callers that only need the edited spectrum.
pub fn edited_sigma(spec: &SpectralUpdate, profile: &SensitivityProfile, cfg: &EditPolicyConfig) -> Result<DVector<f64>> {
    apply_edit(spec, profile, cfg).map(|(e, _)| e.sigma)
}
