//! JSON reports written by the pipeline.

use serde::Serialize;

use crate::policies::EditPolicyConfig;
use crate::sensitivity::Reducer;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EditWarning {
    /// All sensitivities were zero; the policy fell back to its identity.
    DegenerateProfile,
    /// smooth_abs saw a (nearly) constant magnitude profile and skipped shaping.
    SmoothDegenerate,
    /// smooth_align_mid was requested with mid_factor outside (sup, amp).
    AlignMidIgnored,
    /// The clipped spectrum summed to zero so l1 renormalization was skipped.
    ZeroMass,
}

/// What happened to one module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleEdit {
    pub module_path: String,
    pub alpha: Vec<f64>,
    pub sigma_before: Vec<f64>,
    /// `α ⊙ σ`, before magnitude control.
    pub sigma_edited: Vec<f64>,
    /// After clipping and energy preservation; what gets written back.
    pub sigma_after: Vec<f64>,
    pub k_core: Option<usize>,
    pub k_noise: Option<usize>,
    /// `Σ clipped σ' / Σ σ` before renormalization.
    pub energy_ratio_pre: f64,
    /// `Σ σ'' / Σ σ` after magnitude control.
    pub energy_ratio: f64,
    pub warnings: Vec<EditWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditReport {
    pub schema_version: u32,
    pub policy: String,
    pub reducer: Reducer,
    pub n_cal: usize,
    pub rank: usize,
    pub num_layers: usize,
    pub num_families: usize,
    /// `L · |M| · r` over the edited modules.
    pub total_edited_scalars: usize,
    pub key_prefix: Option<String>,
    pub config: EditPolicyConfig,
    pub modules: Vec<ModuleEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleSpectrum {
    pub module_path: String,
    pub d_out: usize,
    pub d_in: usize,
    pub sigma: Vec<f64>,
    /// `Σ σ_k` (nuclear norm).
    pub l1_energy: f64,
    /// `Σ σ_k²` (squared Frobenius norm).
    pub frobenius_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecomposeReport {
    pub schema_version: u32,
    pub rank: usize,
    pub scale: f64,
    pub families: Vec<String>,
    pub num_layers: usize,
    pub num_families: usize,
    pub total_edited_scalars: usize,
    pub basis_checksum: String,
    pub modules: Vec<ModuleSpectrum>,
}
