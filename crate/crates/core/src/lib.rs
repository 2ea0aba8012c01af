//! Training-free spectrum-only editing of LoRA adapters.
//!
//! A trained low-rank update `s·B·A` is decomposed with a thin SVD, the
//! singular values are reweighted from calibration-gradient sensitivities,
//! and the result is written back as ordinary LoRA factors. The singular
//! subspaces are never modified.
//!
//! Module map:
//!
//! * [`io`] reads and writes adapters, gradient dumps and exported bases.
//! * [`spectral`] holds the thin SVD, magnitude control, reconstruction and
//!   refactoring back into factors.
//! * [`sensitivity`] projects gradients onto singular directions.
//! * [`policies`] turns sensitivities into per-component scalings.
//! * [`alignment`] implements the cross-layer subspace diagnostics.
//! * [`toy`] is a self-contained regression problem with analytic gradients.
//! * [`pipeline`] wires the above into whole-adapter operations.
//! * [`verify`] runs the invariant suites used by the `verify` subcommand.

pub mod alignment;
pub mod error;
pub mod io;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod policies;
pub mod report;
pub mod sensitivity;
pub mod spectral;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use io::{
    AdapterConfig, FactorPair, GradientDump, GradientMode, LoraAdapter, Precision,
};
pub use policies::{EditPolicyConfig, Policy};
pub use sensitivity::{Reducer, SensitivityProfile};
pub use spectral::{EnergyMode, MagnitudeControl, SpectralUpdate};
