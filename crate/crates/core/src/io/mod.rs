//! Adapter, gradient-dump and basis files.

mod adapter;
mod bases;
pub mod container;
mod gradients;

pub use adapter::{
    layer_index, module_family, AdapterConfig, Factor, FactorPair, LoraAdapter, PEFT_PREFIX,
};
pub use bases::{basis_checksum, encode_bases, export_bases, load_bases, BasisTriple};
pub use container::Precision;
pub use gradients::{format_checksum, parse_checksum, GradientDump, GradientMode};
