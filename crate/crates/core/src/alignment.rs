//! Cross-layer geometry of the output subspaces.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{layer_index, module_family, LoraAdapter};
use crate::linalg::orthonormality_error;
use crate::par;
use crate::spectral::decompose;

const UNIT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMetric {
    /// `|u₁ᵀu₁'|` of the leading output directions.
    U1Similarity,
    /// `(1/m)‖U_aᵀU_b‖_F²` of the top-m output subspaces.
    SubspaceOverlap,
}

impl AlignmentMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentMetric::U1Similarity => "u1_similarity",
            AlignmentMetric::SubspaceOverlap => "subspace_overlap",
        }
    }
}

impl fmt::Display for AlignmentMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignmentMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "u1_similarity" | "u1" => Ok(AlignmentMetric::U1Similarity),
            "subspace_overlap" | "subspace" => Ok(AlignmentMetric::SubspaceOverlap),
            _ => Err(Error::InvalidArgument(format!("unknown alignment metric {s:?}"))),
        }
    }
}

/// `|u_aᵀu_b|` for unit vectors.
pub fn align_u1(u_a: &[f64], u_b: &[f64]) -> Result<f64> {
    if u_a.len() != u_b.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            u_a.len(),
            u_b.len()
        )));
    }
    for u in [u_a, u_b] {
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!("vector norm {norm} is not 1")));
        }
    }
    let dot: f64 = u_a.iter().zip(u_b).map(|(a, b)| a * b).sum();
    Ok(dot.abs().min(1.0))
}

/// `(1/m)‖U_aᵀU_b‖_F²`, the mean squared cosine of the principal angles
/// between the column spans of two orthonormal `d × m` blocks.
pub fn align_subspace(u_a: &DMatrix<f64>, u_b: &DMatrix<f64>) -> Result<f64> {
    if u_a.shape() != u_b.shape() {
        return Err(Error::Shape(format!(
            "blocks of shape {:?} and {:?}",
            u_a.shape(),
            u_b.shape()
        )));
    }
    let m = u_a.ncols();
    if m == 0 {
        return Err(Error::InvalidArgument("subspace dimension must be positive".into()));
    }
    for u in [u_a, u_b] {
        let err = orthonormality_error(u);
        if err > UNIT_TOL {
            return Err(Error::InvalidArgument(format!(
                "block is not orthonormal (max |UᵀU − I| = {err:e})"
            )));
        }
    }
    let overlap = (u_a.transpose() * u_b).norm_squared() / m as f64;
    Ok(overlap.clamp(0.0, 1.0))
}

/// Expected overlap of two uniformly random m-subspaces of `R^d`.
pub fn random_baseline(d: usize, m: usize) -> f64 {
    m as f64 / d as f64
}

/// `L · |M| · r`.
pub fn count_edited_scalars(num_layers: usize, num_families: usize, r: usize) -> usize {
    num_layers * num_families * r
}

/// Pairwise layer-by-layer alignment for one module family.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub metric: AlignmentMetric,
    /// Subspace dimension; 1 for [`AlignmentMetric::U1Similarity`].
    pub m: usize,
    pub module_family: String,
    pub layer_ids: Vec<usize>,
    pub d_model: usize,
    pub values: DMatrix<f64>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    metric: AlignmentMetric,
    m: usize,
    family: &'a str,
    layers: &'a [usize],
    d_model: usize,
    baseline: f64,
}

impl AlignmentMatrix {
    /// `m/d` for subspace overlap. For u1 similarity this is the expected
    /// square of the metric, `1/d`.
    pub fn baseline(&self) -> f64 {
        random_baseline(self.d_model, self.m)
    }

    /// Mean of the strictly upper-triangular entries.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let n = self.values.nrows();
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.values[(i, j)])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for id in &self.layer_ids {
            out.push_str(&format!(",{id}"));
        }
        out.push('\n');
        for (i, id) in self.layer_ids.iter().enumerate() {
            out.push_str(&id.to_string());
            for j in 0..self.layer_ids.len() {
                out.push(',');
                out.push_str(&format_significant(self.values[(i, j)], 9));
            }
            out.push('\n');
        }
        out
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string(&Sidecar {
            metric: self.metric,
            m: self.m,
            family: &self.module_family,
            layers: &self.layer_ids,
            d_model: self.d_model,
            baseline: self.baseline(),
        })
        .expect("sidecar serializes")
    }

    /// Sidecar path: the CSV path with its extension replaced by `json`.
    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes the CSV and its one-line JSON sidecar; returns the sidecar path.
    pub fn write(&self, csv_path: &Path) -> Result<PathBuf> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let sidecar = Self::sidecar_path(csv_path);
        fs::write(&sidecar, self.sidecar_json() + "\n").map_err(|e| Error::io(&sidecar, e))?;
        Ok(sidecar)
    }
}

/// `%.{digits}g`-style formatting.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Layer id → module path for one family, failing if a layer lacks it.
fn family_by_layer(adapter: &LoraAdapter, family: &str) -> Result<BTreeMap<usize, String>> {
    let mut layers: BTreeMap<usize, Option<String>> = BTreeMap::new();
    for path in adapter.modules.keys() {
        let Some(layer) = layer_index(path) else {
            continue;
        };
        let slot = layers.entry(layer).or_default();
        if module_family(path) == family {
            if slot.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} has more than one {family} module"
                )));
            }
            *slot = Some(path.clone());
        }
    }
    if layers.is_empty() {
        return Err(Error::FamilyAbsent {
            family: family.to_string(),
            layer: 0,
        });
    }
    layers
        .into_iter()
        .map(|(layer, path)| {
            path.map(|p| (layer, p)).ok_or_else(|| Error::FamilyAbsent {
                family: family.to_string(),
                layer,
            })
        })
        .collect()
}

fn check_m(m: usize, r: usize) -> Result<()> {
    if m == 0 || m > r {
        return Err(Error::InvalidArgument(format!(
            "subspace dimension m={m} must lie in 1..={r}"
        )));
    }
    Ok(())
}

/// Top-m left singular vectors of each listed module.
fn top_blocks(adapter: &LoraAdapter, paths: &[String], m: usize) -> Result<Vec<DMatrix<f64>>> {
    let scale = adapter.scale();
    par::try_map(paths, |path| {
        let spec = decompose(&adapter.modules[path], scale, path)?;
        Ok(spec.u.columns(0, m).into_owned())
    })
}

/// Symmetric layer × layer matrix of the chosen metric for one family.
pub fn layer_heatmap(
    adapter: &LoraAdapter,
    family: &str,
    metric: AlignmentMetric,
    m: usize,
) -> Result<AlignmentMatrix> {
    let m = match metric {
        AlignmentMetric::U1Similarity => 1,
        AlignmentMetric::SubspaceOverlap => m,
    };
    check_m(m, adapter.rank())?;
    let by_layer = family_by_layer(adapter, family)?;
    let layer_ids: Vec<usize> = by_layer.keys().copied().collect();
    let paths: Vec<String> = by_layer.into_values().collect();
    let d_model = adapter.modules[&paths[0]].d_out();
    let blocks = top_blocks(adapter, &paths, m)?;

    let n = blocks.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let cells = par::try_map(&pairs, |&(i, j)| {
        let (a, b) = (&blocks[i], &blocks[j]);
        if a.nrows() != b.nrows() {
            return Err(Error::Shape(format!(
                "{family} output dimension differs between layers {} and {}",
                layer_ids[i], layer_ids[j]
            )));
        }
        match metric {
            AlignmentMetric::U1Similarity => align_u1(a.as_slice(), b.as_slice()),
            AlignmentMetric::SubspaceOverlap => align_subspace(a, b),
        }
    })?;
    let mut values = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(cells) {
        values[(i, j)] = v;
        values[(j, i)] = v;
    }
    Ok(AlignmentMatrix {
        metric,
        m,
        module_family: family.to_string(),
        layer_ids,
        d_model,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSynergy {
    pub layer: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynergyReport {
    pub family_a: String,
    pub family_b: String,
    pub m: usize,
    pub d_model: usize,
    pub baseline: f64,
    pub layers: Vec<LayerSynergy>,
}

/// Per-layer overlap of the top-m output subspaces of `o_proj` and `down_proj`.
pub fn intra_layer_synergy(adapter: &LoraAdapter, m: usize) -> Result<SynergyReport> {
    synergy_between(adapter, "o_proj", "down_proj", m)
}

/// Per-layer overlap between two families that write into the same space.
pub fn synergy_between(
    adapter: &LoraAdapter,
    family_a: &str,
    family_b: &str,
    m: usize,
) -> Result<SynergyReport> {
    check_m(m, adapter.rank())?;
    let a = family_by_layer(adapter, family_a)?;
    let b = family_by_layer(adapter, family_b)?;
    let mut paths = Vec::with_capacity(2 * a.len());
    let mut layers = Vec::with_capacity(a.len());
    for (layer, pa) in &a {
        let pb = b.get(layer).ok_or_else(|| Error::FamilyAbsent {
            family: family_b.to_string(),
            layer: *layer,
        })?;
        let (da, db) = (adapter.modules[pa].d_out(), adapter.modules[pb].d_out());
        if da != db {
            return Err(Error::Shape(format!(
                "layer {layer}: {family_a} writes {da} features, {family_b} writes {db}"
            )));
        }
        paths.push(pa.clone());
        paths.push(pb.clone());
        layers.push(*layer);
    }
    let d_model = adapter.modules[&paths[0]].d_out();
    let blocks = top_blocks(adapter, &paths, m)?;
    let layers = layers
        .into_iter()
        .zip(blocks.chunks(2))
        .map(|(layer, pair)| {
            Ok(LayerSynergy {
                layer,
                overlap: align_subspace(&pair[0], &pair[1])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynergyReport {
        family_a: family_a.to_string(),
        family_b: family_b.to_string(),
        m,
        d_model,
        baseline: random_baseline(d_model, m),
        layers,
    })
}
