use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use super::adapter::{out_tensor, to_matrix, PEFT_PREFIX};
use super::container;
use crate::error::{Error, Result};

const GRAD_SUFFIX: &str = ".grad";
const PROJ_SUFFIX: &str = ".proj";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// One averaged `d_out × d_in` gradient per module.
    FullMatrix,
    /// Per-example projections `n_cal × r` onto exported bases.
    Projections,
}

impl GradientMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GradientMode::FullMatrix => "full_matrix",
            GradientMode::Projections => "projections",
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            GradientMode::FullMatrix => GRAD_SUFFIX,
            GradientMode::Projections => PROJ_SUFFIX,
        }
    }
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_matrix" | "full-matrix" => Ok(GradientMode::FullMatrix),
            "projections" => Ok(GradientMode::Projections),
            other => Err(Error::InvalidArgument(format!("unknown gradient mode {other:?}"))),
        }
    }
}

/// Calibration gradients for a set of modules.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDump {
    pub mode: GradientMode,
    pub n_cal: usize,
    pub seed: u64,
    /// FNV-1a over the bases the projections were computed against.
    pub basis_checksum: Option<u64>,
    /// First calibration example index, when the producer records it.
    pub example_start: Option<u64>,
    /// `d_out × d_in` gradients or `n_cal × r` projections, by module path.
    pub modules: BTreeMap<String, DMatrix<f64>>,
}

impl GradientDump {
    pub fn load(path: &Path) -> Result<Self> {
        let file = container::read(path)?;
        let meta = &file.metadata;
        let field = |name: &str| {
            meta.get(name)
                .ok_or_else(|| Error::Dump(format!("missing metadata field {name}")))
        };
        let mode: GradientMode = field("mode")?.parse()?;
        let n_cal: usize = field("n_cal")?
            .parse()
            .map_err(|_| Error::Dump("n_cal is not an integer".into()))?;
        let seed: u64 = field("seed")?
            .parse()
            .map_err(|_| Error::Dump("seed is not an integer".into()))?;
        let basis_checksum = meta
            .get("basis_checksum")
            .map(|s| parse_checksum(s))
            .transpose()?;
        let example_start = meta
            .get("example_start")
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Dump("example_start is not an integer".into()))
            })
            .transpose()?;

        let mut seen_grad = false;
        let mut seen_proj = false;
        let mut modules = BTreeMap::new();
        for (key, tensor) in file.tensors {
            let key = key.strip_prefix(PEFT_PREFIX).unwrap_or(&key).to_string();
            let (module, what) = if let Some(m) = key.strip_suffix(GRAD_SUFFIX) {
                seen_grad = true;
                (m.to_string(), "grad")
            } else if let Some(m) = key.strip_suffix(PROJ_SUFFIX) {
                seen_proj = true;
                (m.to_string(), "proj")
            } else {
                return Err(Error::Dump(format!("unrecognized tensor key {key}")));
            };
            if seen_grad && seen_proj {
                return Err(Error::MixedGradientModes);
            }
            let m = to_matrix(&module, what, tensor)?;
            modules.insert(module, m);
        }
        if (seen_grad && mode != GradientMode::FullMatrix)
            || (seen_proj && mode != GradientMode::Projections)
        {
            return Err(Error::Dump(format!(
                "metadata mode {mode} disagrees with the tensor keys"
            )));
        }

        let dump = Self {
            mode,
            n_cal,
            seed,
            basis_checksum,
            example_start,
            modules,
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cal == 0 {
            return Err(Error::Dump("n_cal must be at least 1".into()));
        }
        if self.mode == GradientMode::Projections {
            let mut cols = None;
            for (module, proj) in &self.modules {
                if proj.nrows() != self.n_cal {
                    return Err(Error::Dump(format!(
                        "{module}.proj has {} rows but n_cal is {}",
                        proj.nrows(),
                        self.n_cal
                    )));
                }
                if *cols.get_or_insert(proj.ncols()) != proj.ncols() {
                    return Err(Error::Dump(format!(
                        "{module}.proj has {} columns, other modules have {}",
                        proj.ncols(),
                        cols.unwrap()
                    )));
                }
            }
        }
        for (module, m) in &self.modules {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(module.clone()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut meta = BTreeMap::new();
        meta.insert("mode".to_string(), self.mode.as_str().to_string());
        meta.insert("n_cal".to_string(), self.n_cal.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        if let Some(sum) = self.basis_checksum {
            meta.insert("basis_checksum".to_string(), format_checksum(sum));
        }
        if let Some(start) = self.example_start {
            meta.insert("example_start".to_string(), start.to_string());
        }
        let tensors = self
            .modules
            .iter()
            .map(|(module, m)| (format!("{module}{}", self.mode.suffix()), out_tensor(m)))
            .collect();
        container::encode(&tensors, &meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

pub fn format_checksum(sum: u64) -> String {
    format!("{sum:016x}")
}

pub fn parse_checksum(s: &str) -> Result<u64> {
    let digits = s.trim_start_matches("0x");
    u64::from_str_radix(digits, 16)
        .map_err(|_| Error::Dump(format!("basis_checksum {s:?} is not a hex u64")))
}
