use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectral_surgeon::alignment::{align_subspace, align_u1};
use spectral_surgeon::io::{AdapterConfig, FactorPair, LoraAdapter};
use spectral_surgeon::linalg::{gaussian_matrix, orthonormality_error, random_orthonormal};
use spectral_surgeon::policies::{
    alpha_abs_select, alpha_grad_direction, alpha_random_index, alpha_smooth_abs, apply_alpha,
    apply_edit, selection_counts, EditPolicyConfig, Policy,
};
use spectral_surgeon::sensitivity::{RawSensitivity, Reducer};
use spectral_surgeon::spectral::{
    apply_magnitude_control, containment_residuals, decompose, EnergyMode, MagnitudeControl,
};

fn factors(seed: u64, d_out: usize, d_in: usize, r: usize) -> FactorPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FactorPair::new(gaussian_matrix(&mut rng, r, d_in), gaussian_matrix(&mut rng, d_out, r)).unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=12).prop_flat_map(|r| (r..=40, r..=30, Just(r)))
}

fn profile(x: &[f64], g: &[f64]) -> spectral_surgeon::SensitivityProfile {
    RawSensitivity {
        module_path: "m".into(),
        g_signed: DVector::from_row_slice(g),
        s_magnitude: DVector::from_row_slice(x),
        n_cal: 1,
        reducer: Reducer::MeanAbs,
    }
    .normalize()
}

fn multiset(alpha: &[f64], cfg: &EditPolicyConfig) -> (usize, usize, usize) {
    let count = |v: f64| alpha.iter().filter(|&&a| a == v).count();
    (count(cfg.amp_factor), count(cfg.sup_factor), count(cfg.mid_factor))
}

fn distinct_gates() -> EditPolicyConfig {
    EditPolicyConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_invariants((d_out, d_in, r) in dims(), seed in any::<u64>(), scale in 0.1f64..8.0) {
        let f = factors(seed, d_out, d_in, r);
        let spec = decompose(&f, scale, "m").unwrap();
        prop_assert!(orthonormality_error(&spec.u) <= 1e-10);
        prop_assert!(orthonormality_error(&spec.v) <= 1e-10);
        let target = f.effective_update(scale);
        prop_assert!((spec.reconstruct() - &target).norm() <= 1e-10 * target.norm());
        prop_assert!(spec.sigma.iter().all(|&s| s >= 0.0));
        prop_assert!(spec.sigma.as_slice().windows(2).all(|w| w[0] >= w[1]));
        for k in 0..r {
            let col = spec.u.column(k);
            let imax = col.iamax();
            prop_assert!(col[imax] > 0.0);
        }
        let back = spec.refactor().unwrap();
        prop_assert!((back.effective_update(scale) - &target).norm() <= 1e-10 * target.norm());
    }

    #[test]
    fn l1_energy_is_preserved(sigma in prop::collection::vec(0.01f64..10.0, 1..16),
                              alpha_seed in any::<u64>(), clip in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(alpha_seed);
        let alpha = gaussian_matrix(&mut rng, sigma.len(), 1).map(|z| (0.5 * z).exp());
        let edited: Vec<f64> = sigma.iter().zip(alpha.iter()).map(|(s, a)| s * a).collect();
        let mc = MagnitudeControl { sigma_clip_min: clip, energy_mode: EnergyMode::L1 };
        let out = apply_magnitude_control(&sigma, &edited, &mc).unwrap();
        let before: f64 = sigma.iter().sum();
        prop_assert!((out.sigma.sum() - before).abs() <= 1e-12 * before);
        let none = MagnitudeControl { sigma_clip_min: clip, energy_mode: EnergyMode::None };
        let out = apply_magnitude_control(&sigma, &edited, &none).unwrap();
        prop_assert!(out.sigma.iter().all(|&s| s >= clip));
    }

    #[test]
    fn abs_select_ranking_fidelity(x in prop::collection::vec(prop_oneof![0.0f64..4.0, Just(1.0)], 1..=8),
                                   p in 0.0f64..=1.0, q in 0.0f64..=1.0, kmin in 0usize..3) {
        let cfg = EditPolicyConfig { core_frac: p, noise_frac: q, min_core_k: kmin, ..distinct_gates() };
        let sel = alpha_abs_select(&x, false, &cfg);
        let (kc, kn) = selection_counts(x.len(), p, q, kmin);
        prop_assert_eq!((sel.k_core, sel.k_noise), (kc, kn));
        prop_assert_eq!(multiset(&sel.alpha, &cfg), (kc, kn, x.len() - kc - kn));
        // brute force: every selected index outranks every unselected one,
        // with ties resolved toward the lower index
        let rank_desc = |i: usize, j: usize| x[i] > x[j] || (x[i] == x[j] && i < j);
        let rank_asc = |i: usize, j: usize| x[i] < x[j] || (x[i] == x[j] && i < j);
        let n = x.len();
        for i in 0..n {
            for j in 0..n {
                let (ai, aj) = (sel.alpha[i], sel.alpha[j]);
                if ai == cfg.amp_factor && aj != cfg.amp_factor {
                    prop_assert!(rank_desc(i, j));
                }
                if ai == cfg.sup_factor && aj == cfg.mid_factor {
                    prop_assert!(rank_asc(i, j));
                }
            }
        }
    }

    #[test]
    fn random_index_matches_abs_select_multiset(r in 1usize..=32, p in 0.0f64..=1.0, q in 0.0f64..=1.0,
                                                kmin in 0usize..4, seed in any::<u64>()) {
        let cfg = EditPolicyConfig { core_frac: p, noise_frac: q, min_core_k: kmin, seed, ..distinct_gates() };
        let x: Vec<f64> = (0..r).map(|i| i as f64).collect();
        let a = alpha_abs_select(&x, false, &cfg);
        let b = alpha_random_index(r, &cfg, "model.layers.0.mlp.down_proj");
        prop_assert_eq!(multiset(&a.alpha, &cfg), multiset(&b.alpha, &cfg));
    }

    #[test]
    fn smooth_abs_monotone_and_bounded(x in prop::collection::vec(0.0f64..5.0, 2..24),
                                       align in any::<bool>(), t in 0.05f64..2.0) {
        let cfg = EditPolicyConfig { smooth_align_mid: align, smooth_temperature: t, ..distinct_gates() };
        let gate = alpha_smooth_abs(&x, false, &cfg);
        for i in 0..x.len() {
            prop_assert!(gate.alpha[i] >= cfg.sup_factor && gate.alpha[i] <= cfg.amp_factor);
            if !gate.degenerate {
                let z = (x[i] - gate.center) / gate.temperature;
                if z.abs() <= 30.0 {
                    prop_assert!(gate.alpha[i] > cfg.sup_factor && gate.alpha[i] < cfg.amp_factor);
                }
            }
            for j in 0..x.len() {
                if x[i] < x[j] {
                    prop_assert!(gate.alpha[i] <= gate.alpha[j]);
                }
            }
        }
    }

    #[test]
    fn grad_direction_positive_and_signed(g in prop::collection::vec(-5.0f64..5.0, 1..16),
                                          asym in any::<bool>(), power in 0.0f64..3.0) {
        let cfg = EditPolicyConfig { asymmetric_update: asym, grad_power: power, ..distinct_gates() };
        let alpha = alpha_grad_direction(&g, &cfg);
        for (a, gk) in alpha.iter().zip(&g) {
            prop_assert!(*a > 0.0 && a.is_finite());
            if *gk > 0.0 { prop_assert!(*a <= 1.0); }
            if *gk < 0.0 { prop_assert!(*a >= 1.0); }
        }
    }

    #[test]
    fn edits_stay_in_the_subspace((d_out, d_in, r) in dims(), seed in any::<u64>(),
                                  pi in 0usize..4, energy in any::<bool>()) {
        let f = factors(seed, d_out, d_in, r);
        let spec = decompose(&f, 2.0, "m").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let g: Vec<f64> = gaussian_matrix(&mut rng, r, 1).iter().copied().collect();
        let x: Vec<f64> = g.iter().map(|v| v.abs()).collect();
        let mut cfg = EditPolicyConfig::with_policy(Policy::ALL[pi]);
        cfg.seed = seed;
        if !energy { cfg.magnitude.energy_mode = EnergyMode::None; }
        let (edited, _) = apply_edit(&spec, &profile(&x, &g), &cfg).unwrap();
        let delta = edited.refactor().unwrap().effective_update(2.0);
        let (left, right) = containment_residuals(&spec.u, &spec.v, &delta);
        prop_assert!(left.max(right) <= 1e-9 * delta.norm().max(1e-300));
    }

    #[test]
    fn uniform_alpha_is_a_no_op(sigma in prop::collection::vec(0.01f64..10.0, 1..12), c in 0.1f64..5.0) {
        let r = sigma.len();
        let spec = spectral_surgeon::SpectralUpdate {
            module_path: "m".into(),
            u: std::sync::Arc::new(DMatrix::identity(r, r)),
            sigma: DVector::from_row_slice(&sigma),
            v: std::sync::Arc::new(DMatrix::identity(r, r)),
            scale: 1.0,
        };
        let (same, _, _) = apply_alpha(&spec, &vec![1.0; r], &MagnitudeControl::default()).unwrap();
        prop_assert_eq!(&same.sigma, &spec.sigma);
        let (scaled, _, _) = apply_alpha(&spec, &vec![c; r], &MagnitudeControl::default()).unwrap();
        for (a, b) in scaled.sigma.iter().zip(&sigma) {
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn alignment_symmetry_range_and_invariance(d in 8usize..48, m in 1usize..5, seed in any::<u64>()) {
        let m = m.min(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_orthonormal(&mut rng, d, m);
        let b = random_orthonormal(&mut rng, d, m);
        let q = random_orthonormal(&mut rng, m, m);
        let ab = align_subspace(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - align_subspace(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((align_subspace(&(&a * &q), &b).unwrap() - ab).abs() <= 1e-10);
        prop_assert!((align_subspace(&a, &(&b * &q)).unwrap() - ab).abs() <= 1e-10);
        let (ua, ub) = (a.column(0).into_owned(), b.column(0).into_owned());
        let s = align_u1(ua.as_slice(), ub.as_slice()).unwrap();
        prop_assert!((s - align_u1(ub.as_slice(), ua.as_slice()).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn adapter_bytes_round_trip(layers in 1usize..4, (d_out, d_in, r) in dims(), seed in any::<u64>()) {
        let mut modules = BTreeMap::new();
        for l in 0..layers {
            let f = factors(seed.wrapping_add(l as u64), d_out, d_in, r);
            let f = FactorPair::new(f.a.map(|v| v as f32 as f64), f.b.map(|v| v as f32 as f64)).unwrap();
            modules.insert(format!("model.layers.{l}.self_attn.o_proj"), f);
        }
        let adapter = LoraAdapter::new(AdapterConfig::new(r, 2.0 * r as f64, vec!["o_proj".into()]), modules).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (w, c) = (dir.path().join("a.safetensors"), dir.path().join("adapter_config.json"));
        adapter.save(&w, &c).unwrap();
        let back = LoraAdapter::load(&w, &c).unwrap();
        prop_assert_eq!(&back.modules, &adapter.modules);
        prop_assert_eq!(back.to_bytes().unwrap(), std::fs::read(&w).unwrap());
    }
}
