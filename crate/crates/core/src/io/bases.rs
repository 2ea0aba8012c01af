//! Exported singular bases, consumed by external gradient extractors that
//! compute per-example projections.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::adapter::{out_tensor, to_matrix};
use super::container::{self, OutTensor};
use super::gradients::format_checksum;
use crate::error::{Error, Result};
use crate::linalg::{f32_le_bytes_row_major, Fnv1a64};
use crate::spectral::SpectralUpdate;

/// U, σ, V of one module as read back from a bases file.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisTriple {
    pub module_path: String,
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// FNV-1a over the F32 row-major payloads of `U` then `V`, module by module
/// in ascending path order. This is what a dump's `basis_checksum` records.
pub fn basis_checksum<'a, I>(bases: I) -> u64
where
    I: IntoIterator<Item = (&'a str, &'a DMatrix<f64>, &'a DMatrix<f64>)>,
{
    let mut sorted: Vec<_> = bases.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    sorted
        .into_iter()
        .fold(Fnv1a64::new(), |h, (_, u, v)| {
            h.update(&f32_le_bytes_row_major(u))
                .update(&f32_le_bytes_row_major(v))
        })
        .finish()
}

pub fn export_bases(decompositions: &[SpectralUpdate], path: &Path) -> Result<()> {
    std::fs::write(path, encode_bases(decompositions)?).map_err(|e| Error::io(path, e))
}

pub fn encode_bases(decompositions: &[SpectralUpdate]) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    for d in decompositions {
        tensors.insert(format!("{}.U", d.module_path), out_tensor(&d.u));
        tensors.insert(format!("{}.V", d.module_path), out_tensor(&d.v));
        tensors.insert(
            format!("{}.sigma", d.module_path),
            OutTensor::new(
                vec![d.sigma.len()],
                d.sigma.iter().map(|&s| s as f32).collect(),
            ),
        );
    }
    let mut meta = BTreeMap::new();
    let sum = basis_checksum(
        decompositions
            .iter()
            .map(|d| (d.module_path.as_str(), &*d.u, &*d.v)),
    );
    meta.insert("basis_checksum".to_string(), format_checksum(sum));
    container::encode(&tensors, &meta)
}

pub fn load_bases(path: &Path) -> Result<Vec<BasisTriple>> {
    let file = container::read(path)?;
    let mut parts: BTreeMap<String, [Option<container::TensorData>; 3]> = BTreeMap::new();
    for (key, t) in file.tensors {
        let (module, slot) = if let Some(m) = key.strip_suffix(".U") {
            (m, 0)
        } else if let Some(m) = key.strip_suffix(".sigma") {
            (m, 1)
        } else if let Some(m) = key.strip_suffix(".V") {
            (m, 2)
        } else {
            return Err(Error::Container {
                path: path.to_path_buf(),
                reason: format!("unrecognized tensor key {key}"),
            });
        };
        parts.entry(module.to_string()).or_default()[slot] = Some(t);
    }
    parts
        .into_iter()
        .map(|(module, [u, sigma, v])| {
            let missing = || Error::Container {
                path: path.to_path_buf(),
                reason: format!("incomplete basis triple for {module}"),
            };
            let u = to_matrix(&module, "U", u.ok_or_else(missing)?)?;
            let v = to_matrix(&module, "V", v.ok_or_else(missing)?)?;
            let sigma = sigma.ok_or_else(missing)?;
            if sigma.shape.len() != 1 || sigma.shape[0] != u.ncols() || v.ncols() != u.ncols() {
                return Err(Error::Shape(format!(
                    "{module}: U {:?}, sigma {:?}, V {:?} disagree on rank",
                    u.shape(),
                    sigma.shape,
                    v.shape()
                )));
            }
            Ok(BasisTriple {
                module_path: module,
                u,
                sigma: DVector::from_vec(sigma.values),
                v,
            })
        })
        .collect()
}
