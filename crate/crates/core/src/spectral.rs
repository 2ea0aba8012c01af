//! Thin SVD of a LoRA update and the spectrum-side operations on it.
//!
//! The update `s·B·A` is never materialized. With `B = Q_B R_B` and
//! `Aᵀ = Q_A R_A`, the product is `Q_B (s·R_B R_Aᵀ) Q_Aᵀ`, so an SVD of the
//! `r × r` core `Ũ Σ Ṽᵀ` gives `U = Q_B Ũ` and `V = Q_A Ṽ` at
//! `O((d_out + d_in) r² + r³)` cost.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{FactorPair, Precision};
use crate::linalg::all_finite;

/// `U · diag(σ) · Vᵀ` for one module, at the adapter's effective scale.
///
/// Bases are shared behind `Arc` so that edits, which only touch `sigma`,
/// keep pointing at the very same `U` and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralUpdate {
    pub module_path: String,
    pub u: Arc<DMatrix<f64>>,
    pub sigma: DVector<f64>,
    pub v: Arc<DMatrix<f64>>,
    /// `α / r`: the multiplier that makes `scale · B · A` the effective update.
    pub scale: f64,
}

impl SpectralUpdate {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn d_out(&self) -> usize {
        self.u.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.v.nrows()
    }

    /// Same bases and scale, different spectrum.
    pub fn with_sigma(&self, sigma: DVector<f64>) -> Self {
        assert_eq!(sigma.len(), self.rank(), "spectrum length must match rank");
        Self {
            module_path: self.module_path.clone(),
            u: Arc::clone(&self.u),
            sigma,
            v: Arc::clone(&self.v),
            scale: self.scale,
        }
    }

    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = (*self.u).clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.sigma[k];
        }
        scaled * self.v.transpose()
    }

    /// Back to LoRA factors with the symmetric square-root split:
    /// `B' = U·diag(√(σ/s))`, `A' = diag(√(σ/s))·Vᵀ`, so `s·B'·A'` equals
    /// [`reconstruct`](Self::reconstruct).
    pub fn refactor(&self) -> Result<FactorPair> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{}: refactor needs a finite nonnegative spectrum",
                self.module_path
            )));
        }
        let roots: Vec<f64> = self.sigma.iter().map(|s| (s / self.scale).sqrt()).collect();
        let mut b = (*self.u).clone();
        for (k, mut col) in b.column_iter_mut().enumerate() {
            col *= roots[k];
        }
        let mut a = self.v.transpose();
        for (k, mut row) in a.row_iter_mut().enumerate() {
            row *= roots[k];
        }
        FactorPair::with_precision(a, b, Precision::F32)
    }
}

/// Thin SVD of `scale · B · A` through the QR core.
///
/// The result always has rank `r`. When the numerical rank is lower the
/// trailing singular values are zero and the trailing basis columns are
/// still orthonormal. Each pair `(u_k, v_k)` is signed so that the largest
/// magnitude entry of `u_k` is positive.
pub fn decompose(factors: &FactorPair, scale: f64, module_path: &str) -> Result<SpectralUpdate> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{module_path}: scale must be positive, got {scale}"
        )));
    }
    if !all_finite(&factors.a) || !all_finite(&factors.b) {
        return Err(Error::NonFinite(module_path.to_string()));
    }
    let r = factors.rank();
    if r == 0 || r > factors.d_out() || r > factors.d_in() {
        return Err(Error::Shape(format!(
            "{module_path}: rank {r} not in 1..=min(d_out={}, d_in={})",
            factors.d_out(),
            factors.d_in()
        )));
    }

    let qr_b = factors.b.clone().qr();
    let (q_b, r_b) = (qr_b.q(), qr_b.r());
    let qr_a = factors.a.transpose().qr();
    let (q_a, r_a) = (qr_a.q(), qr_a.r());

    let core = (r_b * r_a.transpose()) * scale;
    let (u_core, values, v_core) =
        jacobi_svd(core).ok_or_else(|| Error::Decomposition(module_path.to_string()))?;

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));

    let u_core = DMatrix::from_fn(r, r, |i, k| u_core[(i, order[k])]);
    let v_core = DMatrix::from_fn(r, r, |i, k| v_core[(i, order[k])]);
    let sigma = DVector::from_iterator(r, order.iter().map(|&k| values[k]));

    let mut u = q_b * u_core;
    let mut v = q_a * v_core;
    for k in 0..r {
        let pivot = u
            .column(k)
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            u.column_mut(k).neg_mut();
            v.column_mut(k).neg_mut();
        }
    }

    Ok(SpectralUpdate {
        module_path: module_path.to_string(),
        u: Arc::new(u),
        sigma,
        v: Arc::new(v),
        scale,
    })
}

/// One-sided Jacobi SVD of a small square matrix, returning `(U, s, V)`
/// with `M = U diag(s) Vᵀ`, unsorted. Used for the r×r core because the
/// bidiagonal QR iteration can stall on nearly repeated singular values.
fn jacobi_svd(m: DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    const MAX_SWEEPS: usize = 60;
    let n = m.ncols();
    let mut w = m;
    let mut v = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for i in 0..n {
                        let (xp, xq) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * xp - s * xq;
                        mat[(i, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }

    let values: Vec<f64> = (0..n).map(|k| w.column(k).norm()).collect();
    let tiny = values.iter().copied().fold(0.0, f64::max) * n as f64 * f64::EPSILON;
    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut filled = Vec::with_capacity(n);
    for k in 0..n {
        if values[k] > tiny {
            u.set_column(k, &(w.column(k) / values[k]));
            filled.push(k);
        }
    }
    // Complete U for (numerically) zero singular values with unit vectors
    // orthogonalized against the columns already in place.
    let mut candidate = 0;
    for k in (0..n).filter(|k| values[*k] <= tiny) {
        loop {
            if candidate >= n {
                return None;
            }
            let mut x = DVector::<f64>::zeros(n);
            x[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &j in &filled {
                    let proj = u.column(j).dot(&x);
                    x -= u.column(j) * proj;
                }
            }
            let norm = x.norm();
            if norm > 0.5 {
                u.set_column(k, &(x / norm));
                filled.push(k);
                break;
            }
        }
    }
    Some((u, values, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    /// Rescale the edited spectrum so its sum matches the original.
    #[default]
    L1,
    None,
}

impl fmt::Display for EnergyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnergyMode::L1 => "l1",
            EnergyMode::None => "none",
        })
    }
}

impl FromStr for EnergyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(EnergyMode::L1),
            "none" => Ok(EnergyMode::None),
            other => Err(Error::InvalidArgument(format!("unknown energy mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MagnitudeControl {
    pub sigma_clip_min: f64,
    pub energy_mode: EnergyMode,
}

/// Output of [`apply_magnitude_control`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledSpectrum {
    pub sigma: DVector<f64>,
    /// `Σ clipped / Σ original`, measured before any renormalization.
    pub energy_ratio_pre: f64,
    /// The clipped spectrum summed to zero, so l1 rescaling was skipped.
    pub zero_mass: bool,
}

/// Clamp the edited spectrum at `sigma_clip_min`, then (in l1 mode) rescale
/// it so that its sum equals the sum of `original`.
pub fn apply_magnitude_control(
    original: &[f64],
    edited: &[f64],
    cfg: &MagnitudeControl,
) -> Result<ControlledSpectrum> {
    if original.len() != edited.len() {
        return Err(Error::Shape(format!(
            "spectrum lengths differ: {} vs {}",
            original.len(),
            edited.len()
        )));
    }
    if !cfg.sigma_clip_min.is_finite() {
        return Err(Error::InvalidArgument("sigma_clip_min must be finite".into()));
    }
    let mut out: Vec<f64> = edited.iter().map(|&s| s.max(cfg.sigma_clip_min)).collect();
    let orig_mass: f64 = original.iter().sum();
    let mass: f64 = out.iter().sum();
    let energy_ratio_pre = if orig_mass > 0.0 {
        mass / orig_mass
    } else if mass == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };

    let mut zero_mass = false;
    if cfg.energy_mode == EnergyMode::L1 {
        if mass > 0.0 {
            let factor = orig_mass / mass;
            out.iter_mut().for_each(|s| *s *= factor);
        } else {
            zero_mass = true;
        }
    }
    Ok(ControlledSpectrum {
        sigma: DVector::from_vec(out),
        energy_ratio_pre,
        zero_mass,
    })
}

/// `(‖(I − UUᵀ)·ΔW‖_F, ‖ΔW·(I − VVᵀ)‖_F)`: how much of `delta` leaves the
/// column space of `U` and the row space of `V`.
pub fn containment_residuals(u: &DMatrix<f64>, v: &DMatrix<f64>, delta: &DMatrix<f64>) -> (f64, f64) {
    let left = delta - u * (u.transpose() * delta);
    let right = delta - (delta * v) * v.transpose();
    (left.norm(), right.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, orthonormality_error, relative_frobenius};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(a: DMatrix<f64>, b: DMatrix<f64>) -> FactorPair {
        FactorPair::new(a, b).unwrap()
    }

    #[test]
    fn rank_one_outer_product() {
        let b = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        let a = DMatrix::from_row_slice(1, 3, &[2.0, 0.0, 0.0]);
        let d = decompose(&pair(a, b), 1.0, "m").unwrap();
        assert_relative_eq!(d.sigma[0], 2.0, epsilon = 1e-14);
        assert_relative_eq!(d.u[(0, 0)].abs(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(d.v[(0, 0)].abs(), 1.0, epsilon = 1e-14);
        // sign convention: the dominant entry of u is positive
        assert!(d.u[(0, 0)] > 0.0);
        assert!(d.v[(0, 0)] > 0.0);
    }

    #[test]
    fn scaled_diagonal() {
        let b = DMatrix::identity(2, 2);
        let mut a = DMatrix::zeros(2, 5);
        a[(0, 0)] = 3.0;
        a[(1, 1)] = 1.0;
        let d = decompose(&pair(a, b), 2.0, "m").unwrap();
        assert_relative_eq!(d.sigma[0], 6.0, epsilon = 1e-13);
        assert_relative_eq!(d.sigma[1], 2.0, epsilon = 1e-13);
    }

    #[test]
    fn rank_deficient_input_keeps_full_rank_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = gaussian_matrix(&mut rng, 10, 4);
        b.column_mut(3).fill(0.0);
        let a = gaussian_matrix(&mut rng, 4, 7);
        let d = decompose(&pair(a.clone(), b.clone()), 0.5, "m").unwrap();
        assert_eq!(d.rank(), 4);
        assert!(d.sigma[3].abs() < 1e-12);
        assert!(orthonormality_error(&d.u) < 1e-12);
        assert!(orthonormality_error(&d.v) < 1e-12);
        let target = (&b * &a) * 0.5;
        assert!(relative_frobenius(&d.reconstruct(), &target) < 1e-12);
    }

    #[test]
    fn nearly_repeated_values_reconstruct_exactly() {
        // A toy spectrum with a 0.7% gap that stalls the stock bidiagonal SVD.
        let problem =
            crate::toy::build_toy_problem(9, crate::toy::ToyDims::new(48, 32, 8, 64)).unwrap();
        let d = decompose(&problem.factors, problem.scale, "m").unwrap();
        let target = problem.effective_update();
        assert!(relative_frobenius(&d.reconstruct(), &target) < 1e-13);
        assert!(orthonormality_error(&d.u) < 1e-12);
        assert!(orthonormality_error(&d.v) < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = DMatrix::from_element(2, 3, 1.0);
        let b = DMatrix::from_element(3, 2, 1.0);
        assert!(decompose(&pair(a.clone(), b.clone()), 0.0, "m").is_err());
        let mut bad = pair(a, b);
        bad.a[(0, 0)] = f64::INFINITY;
        assert!(matches!(decompose(&bad, 1.0, "m"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn magnitude_control_examples() {
        let l1 = MagnitudeControl::default();
        let out = apply_magnitude_control(&[3.0, 1.0], &[6.0, 2.0], &l1).unwrap();
        assert_eq!(out.sigma.as_slice(), &[3.0, 1.0]);
        assert_relative_eq!(out.energy_ratio_pre, 2.0);

        let out = apply_magnitude_control(&[3.0, 1.0], &[0.5, -0.2], &l1).unwrap();
        assert_relative_eq!(out.sigma[0], 4.0, epsilon = 1e-15);
        assert_eq!(out.sigma[1], 0.0);

        let none = MagnitudeControl {
            energy_mode: EnergyMode::None,
            ..Default::default()
        };
        let out = apply_magnitude_control(&[3.0, 1.0], &[6.0, 2.0], &none).unwrap();
        assert_eq!(out.sigma.as_slice(), &[6.0, 2.0]);

        let out = apply_magnitude_control(&[3.0, 1.0], &[-1.0, -2.0], &l1).unwrap();
        assert!(out.zero_mass);
        assert_eq!(out.sigma.as_slice(), &[0.0, 0.0]);

        let clip = MagnitudeControl {
            sigma_clip_min: 0.5,
            energy_mode: EnergyMode::None,
        };
        let out = apply_magnitude_control(&[3.0, 1.0], &[2.0, 0.1], &clip).unwrap();
        assert_eq!(out.sigma.as_slice(), &[2.0, 0.5]);

        assert!(apply_magnitude_control(&[1.0], &[1.0, 2.0], &l1).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = pair(gaussian_matrix(&mut rng, 3, 9), gaussian_matrix(&mut rng, 7, 3));
        let d = decompose(&p, 0.25, "m").unwrap();
        assert!(relative_frobenius(&d.reconstruct(), &p.effective_update(0.25)) < 1e-10);

        let zero = d.with_sigma(DVector::zeros(3));
        assert_eq!(zero.reconstruct().norm(), 0.0);

        let rank1 = decompose(
            &pair(gaussian_matrix(&mut rng, 1, 5), gaussian_matrix(&mut rng, 6, 1)),
            1.0,
            "m",
        )
        .unwrap()
        .with_sigma(DVector::from_element(1, 5.0));
        let expected = rank1.u.column(0) * rank1.v.column(0).transpose() * 5.0;
        assert!(relative_frobenius(&rank1.reconstruct(), &expected) < 1e-14);
        // edits share the bases
        assert!(Arc::ptr_eq(&zero.u, &d.u));
    }

    #[test]
    fn refactor_splits_evenly() {
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let a = DMatrix::from_row_slice(1, 2, &[4.0, 0.0]);
        let d = decompose(&pair(a, b), 1.0, "m").unwrap();
        let f = d.refactor().unwrap();
        assert_relative_eq!(f.b.column(0).norm(), 2.0, epsilon = 1e-14);
        assert_relative_eq!(f.a.row(0).norm(), 2.0, epsilon = 1e-14);

        let d4 = d.with_sigma(DVector::from_element(1, 4.0));
        let d4 = SpectralUpdate { scale: 4.0, ..d4 };
        let f = d4.refactor().unwrap();
        assert_relative_eq!(f.b.column(0).norm(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(f.a.row(0).norm(), 1.0, epsilon = 1e-14);
        let again = decompose(&f, 4.0, "m").unwrap();
        assert_relative_eq!(again.sigma[0], 4.0, epsilon = 1e-13);

        let bad = SpectralUpdate { scale: -1.0, ..d };
        assert!(bad.refactor().is_err());
    }

    #[test]
    fn refactor_reproduces_random_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = pair(gaussian_matrix(&mut rng, 6, 30), gaussian_matrix(&mut rng, 40, 6));
        let d = decompose(&p, 1.7, "m").unwrap();
        let edited = d.with_sigma(d.sigma.map(|s| s * 1.3 + 0.1));
        let f = edited.refactor().unwrap();
        let direct = (&f.b * &f.a) * 1.7;
        assert!(relative_frobenius(&direct, &edited.reconstruct()) <= 1e-9);
    }
}
