//! Per-component sensitivities from calibration gradients.
//!
//! The sensitivity of component `k` is the directional derivative of the
//! calibration loss along `u_k v_kᵀ`, i.e. `g_k = u_kᵀ G v_k`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{basis_checksum, GradientDump, GradientMode};
use crate::par;
use crate::spectral::SpectralUpdate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    /// Mean over examples of `|g_k^(i)|`.
    #[default]
    MeanAbs,
    /// `|mean over examples of g_k^(i)|`.
    MeanSigned,
}

impl fmt::Display for Reducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reducer::MeanAbs => "mean_abs",
            Reducer::MeanSigned => "mean_signed",
        })
    }
}

impl FromStr for Reducer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_abs" | "mean-abs" => Ok(Reducer::MeanAbs),
            "mean_signed" | "mean-signed" => Ok(Reducer::MeanSigned),
            other => Err(Error::InvalidArgument(format!("unknown reducer {other:?}"))),
        }
    }
}

/// `diag(Uᵀ · grad · V)` without forming any rank-one matrix.
pub fn project_gradient(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    grad: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if u.ncols() != v.ncols() || grad.nrows() != u.nrows() || grad.ncols() != v.nrows() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not fit bases U {:?} and V {:?}",
            grad.shape(),
            u.shape(),
            v.shape()
        )));
    }
    let gv = grad * v;
    Ok(DVector::from_iterator(
        u.ncols(),
        (0..u.ncols()).map(|k| u.column(k).dot(&gv.column(k))),
    ))
}

/// Aggregated but not yet normalized sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSensitivity {
    pub module_path: String,
    pub g_signed: DVector<f64>,
    pub s_magnitude: DVector<f64>,
    pub n_cal: usize,
    pub reducer: Reducer,
}

/// Column-wise mean of the signed entries and of their absolute values.
/// Rows are calibration examples, columns are components.
pub fn aggregate(module_path: &str, per_example: &DMatrix<f64>, reducer: Reducer) -> Result<RawSensitivity> {
    let n = per_example.nrows();
    if n == 0 || per_example.ncols() == 0 {
        return Err(Error::InvalidArgument(format!(
            "{module_path}: cannot aggregate an empty projection matrix"
        )));
    }
    let cols = per_example.ncols();
    let mut signed = DVector::zeros(cols);
    let mut magnitude = DVector::zeros(cols);
    for (k, col) in per_example.column_iter().enumerate() {
        let (s, m) = col
            .iter()
            .fold((0.0, 0.0), |(s, m), &g| (s + g, m + g.abs()));
        signed[k] = s / n as f64;
        magnitude[k] = m / n as f64;
    }
    Ok(RawSensitivity {
        module_path: module_path.to_string(),
        g_signed: signed,
        s_magnitude: magnitude,
        n_cal: n,
        reducer,
    })
}

/// Complete per-module sensitivity signal consumed by the edit policies.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    pub module_path: String,
    pub g_signed: DVector<f64>,
    pub s_magnitude: DVector<f64>,
    /// Driving magnitudes divided by their mean.
    pub x_normalized: DVector<f64>,
    /// `g_signed` divided by the same mean.
    pub g_tilde: DVector<f64>,
    pub n_cal: usize,
    pub reducer: Reducer,
    /// All driving magnitudes were zero; shaping is disabled downstream.
    pub degenerate: bool,
}

impl SensitivityProfile {
    pub fn rank(&self) -> usize {
        self.g_signed.len()
    }
}

impl RawSensitivity {
    /// The magnitudes that drive magnitude-based policies under this reducer.
    pub fn driving_magnitude(&self) -> DVector<f64> {
        match self.reducer {
            Reducer::MeanAbs => self.s_magnitude.clone(),
            Reducer::MeanSigned => self.g_signed.abs(),
        }
    }

    /// Within-module mean-absolute normalization.
    pub fn normalize(self) -> SensitivityProfile {
        let drive = self.driving_magnitude();
        let mean = drive.mean();
        let r = drive.len();
        let (x, g_tilde, degenerate) = if mean > 0.0 && mean.is_finite() {
            (drive / mean, &self.g_signed / mean, false)
        } else {
            (DVector::zeros(r), DVector::zeros(r), true)
        };
        SensitivityProfile {
            module_path: self.module_path,
            g_signed: self.g_signed,
            s_magnitude: self.s_magnitude,
            x_normalized: x,
            g_tilde,
            n_cal: self.n_cal,
            reducer: self.reducer,
            degenerate,
        }
    }
}

/// One complete profile per decomposition.
///
/// Full-matrix dumps are projected onto each module's bases and then
/// aggregated as a single averaged example. Projection dumps are aggregated
/// directly, after checking that the dump's basis checksum matches the bases
/// of every module it carries (so `decompositions` must cover all of them).
pub fn sensitivities_from_dump(
    decompositions: &[SpectralUpdate],
    dump: &GradientDump,
    reducer: Reducer,
) -> Result<BTreeMap<String, SensitivityProfile>> {
    for d in decompositions {
        if !dump.modules.contains_key(&d.module_path) {
            return Err(Error::MissingModule(d.module_path.clone()));
        }
    }

    if dump.mode == GradientMode::Projections {
        let recorded = dump
            .basis_checksum
            .ok_or_else(|| Error::Dump("projection dump has no basis_checksum".into()))?;
        let by_path: BTreeMap<&str, &SpectralUpdate> = decompositions
            .iter()
            .map(|d| (d.module_path.as_str(), d))
            .collect();
        let mut covered = Vec::with_capacity(dump.modules.len());
        for module in dump.modules.keys() {
            let d = by_path.get(module.as_str()).ok_or_else(|| {
                Error::Dump(format!(
                    "cannot verify basis checksum: no decomposition for {module}"
                ))
            })?;
            covered.push((module.as_str(), &*d.u, &*d.v));
        }
        let computed = basis_checksum(covered);
        if computed != recorded {
            return Err(Error::ChecksumMismatch { recorded, computed });
        }
    }

    let profiles = par::try_map(decompositions, |d| {
        let data = &dump.modules[&d.module_path];
        let per_example = match dump.mode {
            GradientMode::FullMatrix => {
                let g = project_gradient(&d.u, &d.v, data)?;
                DMatrix::from_row_slice(1, g.len(), g.as_slice())
            }
            GradientMode::Projections => {
                if data.ncols() != d.rank() {
                    return Err(Error::RankMismatch {
                        module: d.module_path.clone(),
                        expected: d.rank(),
                        found: data.ncols(),
                    });
                }
                data.clone()
            }
        };
        let mut raw = aggregate(&d.module_path, &per_example, reducer)?;
        raw.n_cal = dump.n_cal;
        Ok::<_, Error>((d.module_path.clone(), raw.normalize()))
    })?;

    let unique: BTreeSet<&str> = decompositions.iter().map(|d| d.module_path.as_str()).collect();
    debug_assert_eq!(unique.len(), profiles.len());
    Ok(profiles.into_iter().collect())
}
