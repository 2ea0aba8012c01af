//! Whole-adapter operations: decompose, profile, edit and write back.

use std::collections::BTreeSet;

use crate::alignment::count_edited_scalars;
use crate::error::{Error, Result};
use crate::io::{basis_checksum, format_checksum, layer_index, module_family, GradientDump, GradientMode, LoraAdapter};
use crate::par;
use crate::policies::{apply_edit, EditPolicyConfig};
use crate::report::{DecomposeReport, EditReport, ModuleSpectrum, SCHEMA_VERSION};
use crate::sensitivity::{sensitivities_from_dump, Reducer};
use crate::spectral::{decompose, SpectralUpdate};

/// Families that are decomposed and edited; everything else passes through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleFilter {
    families: BTreeSet<String>,
}

impl Default for ModuleFilter {
    fn default() -> Self {
        Self::new(["o_proj", "down_proj"])
    }
}

impl ModuleFilter {
    /// `"*"` matches every family.
    pub fn new<I, S>(families: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            families: families.into_iter().map(Into::into).collect(),
        }
    }

    /// Comma-separated family list.
    pub fn parse(list: &str) -> Self {
        Self::new(list.split(',').map(str::trim).filter(|s| !s.is_empty()))
    }

    pub fn matches(&self, module_path: &str) -> bool {
        self.families.contains("*") || self.families.contains(module_family(module_path))
    }

    pub fn families(&self) -> impl Iterator<Item = &str> {
        self.families.iter().map(String::as_str)
    }

    pub fn select<'a>(&self, adapter: &'a LoraAdapter) -> Vec<&'a str> {
        adapter
            .modules
            .keys()
            .filter(|p| self.matches(p))
            .map(String::as_str)
            .collect()
    }
}

/// Number of distinct layers and families among `paths`.
pub fn layer_family_counts<'a>(paths: impl IntoIterator<Item = &'a str>) -> (usize, usize) {
    let mut layers = BTreeSet::new();
    let mut families = BTreeSet::new();
    for p in paths {
        layers.insert(layer_index(p));
        families.insert(module_family(p));
    }
    (layers.len(), families.len())
}

fn decompose_paths(adapter: &LoraAdapter, paths: &[&str]) -> Result<Vec<SpectralUpdate>> {
    let scale = adapter.scale();
    par::try_map(paths, |p| decompose(&adapter.modules[*p], scale, p))
}

/// Thin SVDs of every filtered module, in sorted path order.
pub fn decompose_adapter(adapter: &LoraAdapter, filter: &ModuleFilter) -> Result<Vec<SpectralUpdate>> {
    let paths = filter.select(adapter);
    if paths.is_empty() {
        return Err(Error::NoModulesMatched);
    }
    decompose_paths(adapter, &paths)
}

pub fn decompose_report(adapter: &LoraAdapter, decomps: &[SpectralUpdate]) -> DecomposeReport {
    let (num_layers, num_families) = layer_family_counts(decomps.iter().map(|d| d.module_path.as_str()));
    let families: BTreeSet<String> = decomps
        .iter()
        .map(|d| module_family(&d.module_path).to_string())
        .collect();
    DecomposeReport {
        schema_version: SCHEMA_VERSION,
        rank: adapter.rank(),
        scale: adapter.scale(),
        families: families.into_iter().collect(),
        num_layers,
        num_families,
        total_edited_scalars: count_edited_scalars(num_layers, num_families, adapter.rank()),
        basis_checksum: format_checksum(basis_checksum(
            decomps.iter().map(|d| (d.module_path.as_str(), &*d.u, &*d.v)),
        )),
        modules: decomps
            .iter()
            .map(|d| ModuleSpectrum {
                module_path: d.module_path.clone(),
                d_out: d.d_out(),
                d_in: d.d_in(),
                sigma: d.sigma.as_slice().to_vec(),
                l1_energy: d.sigma.sum(),
                frobenius_energy: d.sigma.norm_squared(),
            })
            .collect(),
    }
}

/// Edits every filtered module from the dump's sensitivities. Modules outside
/// the filter are carried over untouched, as are modules whose spectrum the
/// policy leaves exactly unchanged.
pub fn edit_adapter(
    adapter: &LoraAdapter,
    dump: &GradientDump,
    cfg: &EditPolicyConfig,
    filter: &ModuleFilter,
    reducer: Reducer,
) -> Result<(LoraAdapter, EditReport)> {
    cfg.validate()?;
    dump.validate()?;
    let targets = filter.select(adapter);
    if targets.is_empty() {
        return Err(Error::NoModulesMatched);
    }
    for t in &targets {
        if !dump.modules.contains_key(*t) {
            return Err(Error::MissingModule(t.to_string()));
        }
    }

    // a projection dump's checksum covers all of its modules
    let mut paths: BTreeSet<&str> = targets.iter().copied().collect();
    if dump.mode == GradientMode::Projections {
        for m in dump.modules.keys() {
            if !adapter.modules.contains_key(m) {
                return Err(Error::Dump(format!("dump module {m} is not in the adapter")));
            }
            paths.insert(m);
        }
    }
    let paths: Vec<&str> = paths.into_iter().collect();
    let decomps = decompose_paths(adapter, &paths)?;
    let profiles = sensitivities_from_dump(&decomps, dump, reducer)?;

    let target_set: BTreeSet<&str> = targets.iter().copied().collect();
    let work: Vec<&SpectralUpdate> = decomps
        .iter()
        .filter(|d| target_set.contains(d.module_path.as_str()))
        .collect();
    let edits = par::try_map(&work, |spec| {
        let (edited, entry) = apply_edit(spec, &profiles[&spec.module_path], cfg)?;
        let factors = if edited.sigma == spec.sigma {
            adapter.modules[&spec.module_path].clone()
        } else {
            edited.refactor()?
        };
        Ok::<_, Error>((factors, entry))
    })?;

    let mut out = adapter.clone();
    let mut entries = Vec::with_capacity(edits.len());
    for (factors, entry) in edits {
        out.modules.insert(entry.module_path.clone(), factors);
        entries.push(entry);
    }
    out.validate()?;

    let (num_layers, num_families) = layer_family_counts(targets.iter().copied());
    let report = EditReport {
        schema_version: SCHEMA_VERSION,
        policy: cfg.policy.to_string(),
        reducer,
        n_cal: dump.n_cal,
        rank: adapter.rank(),
        num_layers,
        num_families,
        total_edited_scalars: count_edited_scalars(num_layers, num_families, adapter.rank()),
        key_prefix: adapter.key_prefix.clone(),
        config: cfg.clone(),
        modules: entries,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::Policy;
    use crate::toy::{build_toy_model, ToyModelDims};

    #[test]
    fn filter_matching() {
        let f = ModuleFilter::default();
        assert!(f.matches("model.layers.0.self_attn.o_proj"));
        assert!(f.matches("model.layers.3.mlp.down_proj"));
        assert!(!f.matches("model.layers.3.mlp.up_proj"));
        assert!(ModuleFilter::parse("*").matches("anything.q_proj"));
        assert_eq!(ModuleFilter::parse(" q_proj, v_proj ,").families().count(), 2);
    }

    #[test]
    fn decompose_counts() {
        let model = build_toy_model(3, ToyModelDims::default()).unwrap();
        let decomps = decompose_adapter(&model.adapter, &ModuleFilter::default()).unwrap();
        assert_eq!(decomps.len(), 4);
        let report = decompose_report(&model.adapter, &decomps);
        assert_eq!((report.num_layers, report.num_families), (2, 2));
        assert_eq!(report.total_edited_scalars, 2 * 2 * 4);
        assert!(matches!(
            decompose_adapter(&model.adapter, &ModuleFilter::parse("gate_proj")),
            Err(Error::NoModulesMatched)
        ));
    }

    #[test]
    fn edit_isolates_unfiltered_modules() {
        let model = build_toy_model(5, ToyModelDims::default()).unwrap();
        let dump = model.full_matrix_dump();
        let cfg = EditPolicyConfig::with_policy(Policy::GradDirection);
        let (out, report) = edit_adapter(&model.adapter, &dump, &cfg, &ModuleFilter::default(), Reducer::MeanAbs).unwrap();
        assert_eq!(report.modules.len(), 4);
        for (path, f) in &out.modules {
            if path.ends_with("q_proj") {
                assert_eq!(f, &model.adapter.modules[path]);
            } else {
                assert_ne!(f.a, model.adapter.modules[path].a);
            }
        }
        for m in &report.modules {
            assert!((m.energy_ratio - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_dump_round_trip() {
        let model = build_toy_model(6, ToyModelDims::default()).unwrap();
        let decomps = decompose_adapter(&model.adapter, &ModuleFilter::default()).unwrap();
        let dump = model.projection_dump(&decomps).unwrap();
        let cfg = EditPolicyConfig::with_policy(Policy::SmoothAbs);
        let (_, report) = edit_adapter(&model.adapter, &dump, &cfg, &ModuleFilter::default(), Reducer::MeanAbs).unwrap();
        assert_eq!(report.n_cal, 16);
        assert_eq!(report.modules.len(), 4);

        let mut wrong = dump.clone();
        wrong.basis_checksum = Some(wrong.basis_checksum.unwrap() ^ 1);
        assert!(matches!(
            edit_adapter(&model.adapter, &wrong, &cfg, &ModuleFilter::default(), Reducer::MeanAbs),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn coverage_gap() {
        let model = build_toy_model(7, ToyModelDims::default()).unwrap();
        let mut dump = model.full_matrix_dump();
        dump.modules.remove("model.layers.0.mlp.down_proj");
        let cfg = EditPolicyConfig::default();
        assert!(matches!(
            edit_adapter(&model.adapter, &dump, &cfg, &ModuleFilter::default(), Reducer::MeanAbs),
            Err(Error::MissingModule(_))
        ));
    }
}
