use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("invalid adapter config: {0}")]
    Config(String),

    #[error("unpaired factor for module {0}")]
    UnpairedFactor(String),

    #[error("rank mismatch in {module}: expected {expected}, found {found}")]
    RankMismatch {
        module: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("mixed gradient modes in dump")]
    MixedGradientModes,

    #[error("invalid gradient dump: {0}")]
    Dump(String),

    #[error("module {0} missing from gradient dump")]
    MissingModule(String),

    #[error("basis checksum mismatch: dump records {recorded:016x}, bases hash to {computed:016x}")]
    ChecksumMismatch { recorded: u64, computed: u64 },

    #[error("decomposition failed for {0}")]
    Decomposition(String),

    #[error("module family {family} absent in layer {layer}")]
    FamilyAbsent { family: String, layer: usize },

    #[error("no modules matched the filter")]
    NoModulesMatched,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Container { .. } => "container",
            Error::Config(_) => "config",
            Error::UnpairedFactor(_) => "unpaired_factor",
            Error::RankMismatch { .. } => "rank_mismatch",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::MixedGradientModes => "mixed_gradient_modes",
            Error::Dump(_) => "dump",
            Error::MissingModule(_) => "missing_module",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::Decomposition(_) => "decomposition",
            Error::FamilyAbsent { .. } => "family_absent",
            Error::NoModulesMatched => "no_modules_matched",
            Error::InvalidArgument(_) => "invalid_argument",
        }
    }
}
