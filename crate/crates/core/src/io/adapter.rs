use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde_json::{Map, Value};

use super::container::{self, OutTensor, Precision, TensorData};
use crate::error::{Error, Result};
use crate::linalg::all_finite;

/// Prefix that common adapter exports put in front of every module path.
pub const PEFT_PREFIX: &str = "base_model.model.";

const LORA_A_SUFFIX: &str = ".lora_A.weight";
const LORA_B_SUFFIX: &str = ".lora_B.weight";

/// The low-rank factors of one adapted module: `A` is `r × d_in`, `B` is
/// `d_out × r`. Values are held in f64 whatever the source precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub precision: Precision,
}

impl FactorPair {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        Self::with_precision(a, b, Precision::F32)
    }

    pub fn with_precision(a: DMatrix<f64>, b: DMatrix<f64>, precision: Precision) -> Result<Self> {
        if a.nrows() != b.ncols() {
            return Err(Error::Shape(format!(
                "A is {}x{} but B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if !all_finite(&a) || !all_finite(&b) {
            return Err(Error::NonFinite("factor pair".into()));
        }
        Ok(Self { a, b, precision })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    /// `scale · B · A`, materialized. Only meant for tests and small problems.
    pub fn effective_update(&self, scale: f64) -> DMatrix<f64> {
        (&self.b * &self.a) * scale
    }
}

/// Adapter configuration. Unknown fields are carried through untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub r: usize,
    pub lora_alpha: f64,
    pub target_modules: Vec<String>,
    pub extra: Map<String, Value>,
}

impl AdapterConfig {
    pub fn new(r: usize, lora_alpha: f64, target_modules: Vec<String>) -> Self {
        Self {
            r,
            lora_alpha,
            target_modules,
            extra: Map::new(),
        }
    }

    /// Multiplier turning `B·A` into the effective update: `α / r`.
    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.r as f64
    }

    pub fn from_json(value: Value) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(Error::Config("config is not a JSON object".into()));
        };
        let r = map
            .remove("r")
            .ok_or_else(|| Error::Config("missing field r".into()))?
            .as_u64()
            .filter(|&r| r >= 1)
            .ok_or_else(|| Error::Config("r must be a positive integer".into()))?
            as usize;
        let lora_alpha = map
            .remove("lora_alpha")
            .ok_or_else(|| Error::Config("missing field lora_alpha".into()))?
            .as_f64()
            .filter(|a| a.is_finite() && *a > 0.0)
            .ok_or_else(|| Error::Config("lora_alpha must be a positive number".into()))?;
        let target_modules = match map.remove("target_modules") {
            None => return Err(Error::Config("missing field target_modules".into())),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    _ => Err(Error::Config("target_modules must hold strings".into())),
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(Error::Config("target_modules must be an array".into())),
        };
        Ok(Self {
            r,
            lora_alpha,
            target_modules,
            extra: map,
        })
    }

    pub fn to_json(&self) -> Value {
        let mut map = self.extra.clone();
        map.insert("r".into(), Value::from(self.r));
        let alpha = if self.lora_alpha.fract() == 0.0 && self.lora_alpha.abs() < 1e15 {
            Value::from(self.lora_alpha as i64)
        } else {
            Value::from(self.lora_alpha)
        };
        map.insert("lora_alpha".into(), alpha);
        map.insert(
            "target_modules".into(),
            Value::from(self.target_modules.clone()),
        );
        Value::Object(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_json()).expect("config serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A LoRA adapter: one [`FactorPair`] per module path, ordered by path.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub config: AdapterConfig,
    pub modules: BTreeMap<String, FactorPair>,
    /// Prefix stripped from tensor keys on load and restored on save.
    pub key_prefix: Option<String>,
}

impl LoraAdapter {
    pub fn new(config: AdapterConfig, modules: BTreeMap<String, FactorPair>) -> Result<Self> {
        let adapter = Self {
            config,
            modules,
            key_prefix: None,
        };
        adapter.validate()?;
        Ok(adapter)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.config.r;
        if r == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        for (path, pair) in &self.modules {
            if pair.rank() != r {
                return Err(Error::RankMismatch {
                    module: path.clone(),
                    expected: r,
                    found: pair.rank(),
                });
            }
            if r > pair.d_out().min(pair.d_in()) {
                return Err(Error::Shape(format!(
                    "{path}: rank {r} exceeds min(d_out={}, d_in={})",
                    pair.d_out(),
                    pair.d_in()
                )));
            }
            if !all_finite(&pair.a) || !all_finite(&pair.b) {
                return Err(Error::NonFinite(path.clone()));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.config.r
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }

    pub fn load(path: &Path, config_path: &Path) -> Result<Self> {
        let config = AdapterConfig::load(config_path)?;
        let file = container::read(path)?;
        Self::from_container(config, file.tensors, path)
    }

    fn from_container(
        config: AdapterConfig,
        tensors: BTreeMap<String, TensorData>,
        path: &Path,
    ) -> Result<Self> {
        let mut prefix_seen = None::<bool>;
        let mut halves: BTreeMap<String, (Option<TensorData>, Option<TensorData>)> =
            BTreeMap::new();
        for (key, tensor) in tensors {
            let (stripped, had_prefix) = match key.strip_prefix(PEFT_PREFIX) {
                Some(rest) => (rest, true),
                None => (key.as_str(), false),
            };
            if *prefix_seen.get_or_insert(had_prefix) != had_prefix {
                return Err(Error::Container {
                    path: path.to_path_buf(),
                    reason: format!("key {key} mixes prefixed and unprefixed module paths"),
                });
            }
            let (module, is_a) = if let Some(m) = stripped.strip_suffix(LORA_A_SUFFIX) {
                (m, true)
            } else if let Some(m) = stripped.strip_suffix(LORA_B_SUFFIX) {
                (m, false)
            } else {
                return Err(Error::Container {
                    path: path.to_path_buf(),
                    reason: format!("unrecognized tensor key {key}"),
                });
            };
            let slot = halves.entry(module.to_string()).or_default();
            if is_a {
                slot.0 = Some(tensor);
            } else {
                slot.1 = Some(tensor);
            }
        }

        let mut modules = BTreeMap::new();
        for (module, pair) in halves {
            let (Some(a), Some(b)) = pair else {
                return Err(Error::UnpairedFactor(module));
            };
            let precision = a.precision;
            let a = to_matrix(&module, "lora_A", a)?;
            let b = to_matrix(&module, "lora_B", b)?;
            if a.nrows() != b.ncols() {
                return Err(Error::Shape(format!(
                    "{module}: lora_A has {} rows but lora_B has {} columns",
                    a.nrows(),
                    b.ncols()
                )));
            }
            modules.insert(module, FactorPair { a, b, precision });
        }
        let adapter = Self {
            config,
            modules,
            key_prefix: prefix_seen
                .unwrap_or(false)
                .then(|| PEFT_PREFIX.to_string()),
        };
        adapter.validate()?;
        Ok(adapter)
    }

    /// Writes the weights to `path` (F32, sorted keys) and the config to
    /// `config_path`.
    pub fn save(&self, path: &Path, config_path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        self.config.save(config_path)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let prefix = self.key_prefix.as_deref().unwrap_or("");
        let mut tensors = BTreeMap::new();
        for (module, pair) in &self.modules {
            tensors.insert(format!("{prefix}{module}{LORA_A_SUFFIX}"), out_tensor(&pair.a));
            tensors.insert(format!("{prefix}{module}{LORA_B_SUFFIX}"), out_tensor(&pair.b));
        }
        container::encode(&tensors, &BTreeMap::new())
    }

    /// Tensor key under which a module's factor is stored.
    pub fn tensor_key(&self, module: &str, factor: Factor) -> String {
        let prefix = self.key_prefix.as_deref().unwrap_or("");
        let suffix = match factor {
            Factor::A => LORA_A_SUFFIX,
            Factor::B => LORA_B_SUFFIX,
        };
        format!("{prefix}{module}{suffix}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    A,
    B,
}

/// Last dotted segment of a module path (`"model.layers.3.mlp.down_proj"` →
/// `"down_proj"`).
pub fn module_family(path: &str) -> &str {
    path.rsplit('.').next().unwrap_or(path)
}

/// Layer index taken from the `layers.<n>` segment of a module path.
pub fn layer_index(path: &str) -> Option<usize> {
    let mut parts = path.split('.');
    while let Some(part) = parts.next() {
        if part == "layers" || part == "h" || part == "blocks" {
            if let Some(n) = parts.clone().next().and_then(|p| p.parse().ok()) {
                return Some(n);
            }
        }
    }
    None
}

pub(crate) fn to_matrix(module: &str, what: &str, t: TensorData) -> Result<DMatrix<f64>> {
    if t.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "{module}.{what} has shape {:?}, expected a matrix",
            t.shape
        )));
    }
    Ok(DMatrix::from_row_slice(t.shape[0], t.shape[1], &t.values))
}

pub(crate) fn out_tensor(m: &DMatrix<f64>) -> OutTensor {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)] as f32);
        }
    }
    OutTensor::new(vec![m.nrows(), m.ncols()], data)
}
