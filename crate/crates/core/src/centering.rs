//! Moment-based linear transfer functions between two subjects' feature
//! spaces, and the centering step that maps source trials into the
//! destination space.
//!
//! For one target with source moments `(μ_X, Σ_X)` and destination moments
//! `(μ_Y, Σ_Y)`, with `W_Y = Σ_Y^{-1/2}`:
//!
//! ```text
//! H ≈ W_Y⁻¹ (I − ½ W_Y diag(θ) W_Yᵀ) Σ_X^{-1/2}
//! θ_i = 2 (W_Y⁻¹ Σ_X^{-1/2} μ_X − μ_Y)_i / (W_Yᵀ Σ_X^{-1/2} μ_X)_i
//! ```
//!
//! The θ expression is the one that makes `H μ_X = μ_Y` hold exactly, so
//! means match whenever no clamp or floor fired.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureDataset;
use crate::moments::{shared_covariance, shrink, sym_inv_sqrt, sym_sqrt, ClassMoments, Whitener};

/// Maximum accepted condition number of an estimated `H`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// First-order Neumann approximation of the square root.
    #[default]
    Neumann,
    /// Exact `(I − W_Y Σ_Z W_Yᵀ)^{1/2}`.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CenteringConfig {
    /// Shrinkage applied to both covariances before any square root.
    pub shrinkage: f64,
    pub use_shared_covariance: bool,
    /// Relative denominator floor; the absolute floor is this times
    /// `‖W_Yᵀ Σ_X^{-1/2} μ_X‖∞`.
    pub denominator_floor: f64,
    /// Reset θ to zero when `‖W_Y diag(θ) W_Yᵀ‖_F ≥ 1`.
    pub frobenius_guard: bool,
    pub branch: Branch,
}

impl Default for CenteringConfig {
    fn default() -> Self {
        Self {
            shrinkage: 0.1,
            use_shared_covariance: false,
            denominator_floor: 1e-8,
            frobenius_guard: true,
            branch: Branch::Neumann,
        }
    }
}

impl CenteringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.denominator_floor > 0.0) {
            return Err(Error::Config("denominator_floor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::Config("shrinkage must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaEstimate {
    pub theta: DVector<f64>,
    pub clamped: usize,
    pub floor_hits: usize,
}

/// Closed-form diagonal local-noise estimate.
pub fn estimate_theta(
    mu_x: &DVector<f64>,
    sigma_x_inv_sqrt: &DMatrix<f64>,
    mu_y: &DVector<f64>,
    w_y: &Whitener,
    relative_floor: f64,
) -> Result<ThetaEstimate> {
    let n = mu_x.len();
    if mu_y.len() != n || sigma_x_inv_sqrt.nrows() != n || w_y.forward.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: mu_y.len(),
        });
    }
    let whitened_x = sigma_x_inv_sqrt * mu_x;
    let numerator = (&w_y.inverse * &whitened_x - mu_y) * 2.0;
    let denominator = w_y.forward.transpose() * &whitened_x;
    let floor = relative_floor * denominator.amax();

    let mut theta = DVector::zeros(n);
    let mut clamped = 0;
    let mut floor_hits = 0;
    for i in 0..n {
        let mut d = denominator[i];
        if !(d.abs() >= floor) || d == 0.0 {
            floor_hits += 1;
            d = if d < 0.0 { -floor } else { floor };
        }
        let t = numerator[i] / d;
        if t < 0.0 {
            clamped += 1;
            theta[i] = 0.0;
        } else {
            theta[i] = t;
        }
    }
    if floor_hits == n || !(floor > 0.0) {
        return Err(Error::DegenerateMeanGeometry);
    }
    Ok(ThetaEstimate {
        theta,
        clamped,
        floor_hits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDiagnostics {
    /// `‖W_Y diag(θ) W_Yᵀ‖_F` of the θ estimate before any guard reset.
    pub frobenius_ratio: f64,
    pub theta_clamped: usize,
    pub denominator_floor_hits: usize,
    /// θ was reset to zero by the Frobenius guard (or because the exact
    /// branch had no real square root).
    pub guard_reset: bool,
    pub condition_number: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    pub target: usize,
    pub h: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub diagnostics: TransferDiagnostics,
}

impl TransferFunction {
    pub fn identity(target: usize, n: usize) -> Self {
        Self {
            target,
            h: DMatrix::identity(n, n),
            theta: DVector::zeros(n),
            diagnostics: TransferDiagnostics {
                frobenius_ratio: 0.0,
                theta_clamped: 0,
                denominator_floor_hits: 0,
                guard_reset: false,
                condition_number: 1.0,
            },
        }
    }

    /// Mean and covariance matched exactly (no clamp, floor or reset fired).
    pub fn is_exact(&self) -> bool {
        let d = &self.diagnostics;
        d.theta_clamped == 0 && d.denominator_floor_hits == 0 && !d.guard_reset
    }
}

/// `W_Y diag(θ) W_Yᵀ`.
fn whitened_noise(w_y: &Whitener, theta: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = w_y.forward.clone();
    for (j, t) in theta.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*t);
    }
    scaled * w_y.forward.transpose()
}

fn transfer_matrix(
    w_y: &Whitener,
    sigma_x_inv_sqrt: &DMatrix<f64>,
    theta: &DVector<f64>,
    branch: Branch,
) -> Result<DMatrix<f64>> {
    let n = theta.len();
    let a = whitened_noise(w_y, theta);
    let middle = match branch {
        Branch::Neumann => DMatrix::identity(n, n) - a * 0.5,
        Branch::Exact => sym_sqrt(&(DMatrix::identity(n, n) - a))?,
    };
    Ok(&w_y.inverse * middle * sigma_x_inv_sqrt)
}

fn condition_number(h: &DMatrix<f64>) -> f64 {
    let sv = h.clone().singular_values();
    sv.max() / sv.min()
}

struct Prepared {
    w_y: Whitener,
    sigma_x_inv_sqrt: DMatrix<f64>,
}

fn prepare(sigma_x: &DMatrix<f64>, sigma_y: &DMatrix<f64>, cfg: &CenteringConfig) -> Result<Prepared> {
    if sigma_x.shape() != sigma_y.shape() {
        return Err(Error::DimensionMismatch {
            expected: sigma_x.nrows(),
            got: sigma_y.nrows(),
        });
    }
    let sx = shrink(sigma_x, cfg.shrinkage)?;
    let sy = shrink(sigma_y, cfg.shrinkage)?;
    Ok(Prepared {
        w_y: Whitener::from_covariance(&sy)?,
        sigma_x_inv_sqrt: sym_inv_sqrt(&sx)?,
    })
}

fn finish(target: usize, h: DMatrix<f64>, theta: DVector<f64>, diagnostics: TransferDiagnostics) -> Result<TransferFunction> {
    let condition = condition_number(&h);
    if !(condition.is_finite() && condition < MAX_CONDITION) || h.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned { target, condition });
    }
    Ok(TransferFunction {
        target,
        h,
        theta,
        diagnostics: TransferDiagnostics {
            condition_number: condition,
            ..diagnostics
        },
    })
}

/// Transfer function for a given θ (no θ estimation, no guard).
pub fn estimate_h_with_theta(
    target: usize,
    sigma_x: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    theta: &DVector<f64>,
    cfg: &CenteringConfig,
) -> Result<TransferFunction> {
    let p = prepare(sigma_x, sigma_y, cfg)?;
    let h = transfer_matrix(&p.w_y, &p.sigma_x_inv_sqrt, theta, cfg.branch)?;
    let ratio = whitened_noise(&p.w_y, theta).norm();
    finish(
        target,
        h,
        theta.clone(),
        TransferDiagnostics {
            frobenius_ratio: ratio,
            theta_clamped: 0,
            denominator_floor_hits: 0,
            guard_reset: false,
            condition_number: 0.0,
        },
    )
}

/// Estimates θ and `H` for one target from the two subjects' moments.
pub fn estimate_h(
    target: usize,
    mu_x: &DVector<f64>,
    sigma_x: &DMatrix<f64>,
    mu_y: &DVector<f64>,
    sigma_y: &DMatrix<f64>,
    cfg: &CenteringConfig,
) -> Result<TransferFunction> {
    cfg.validate()?;
    let p = prepare(sigma_x, sigma_y, cfg)?;
    let est = estimate_theta(mu_x, &p.sigma_x_inv_sqrt, mu_y, &p.w_y, cfg.denominator_floor)?;
    let ratio = whitened_noise(&p.w_y, &est.theta).norm();
    let mut theta = est.theta;
    let mut guard_reset = cfg.frobenius_guard && ratio >= 1.0;
    if guard_reset {
        theta.fill(0.0);
    }
    let h = match transfer_matrix(&p.w_y, &p.sigma_x_inv_sqrt, &theta, cfg.branch) {
        Ok(h) => h,
        Err(Error::SingularCovariance { .. }) if cfg.branch == Branch::Exact => {
            guard_reset = true;
            theta.fill(0.0);
            transfer_matrix(&p.w_y, &p.sigma_x_inv_sqrt, &theta, cfg.branch)?
        }
        Err(e) => return Err(e),
    };
    finish(
        target,
        h,
        theta,
        TransferDiagnostics {
            frobenius_ratio: ratio,
            theta_clamped: est.clamped,
            denominator_floor_hits: est.floor_hits,
            guard_reset,
            condition_number: 0.0,
        },
    )
}

/// One transfer function per target.
///
/// With `use_shared_covariance`, each side's covariance is replaced by its
/// prior-weighted pooled covariance while the means stay per target.
pub fn estimate_all(
    source: &BTreeMap<usize, ClassMoments>,
    dest: &BTreeMap<usize, ClassMoments>,
    cfg: &CenteringConfig,
) -> Result<BTreeMap<usize, TransferFunction>> {
    cfg.validate()?;
    for k in source.keys() {
        if !dest.contains_key(k) {
            return Err(Error::MissingTarget(*k));
        }
    }
    for k in dest.keys() {
        if !source.contains_key(k) {
            return Err(Error::MissingTarget(*k));
        }
    }
    let shared = if cfg.use_shared_covariance {
        Some((shared_covariance(source.values())?, shared_covariance(dest.values())?))
    } else {
        None
    };
    source
        .iter()
        .map(|(&k, sx)| {
            let sy = &dest[&k];
            let tf = match &shared {
                Some((cx, cy)) => estimate_h(k, &sx.mean, cx, &sy.mean, cy, cfg)?,
                None => estimate_h(k, &sx.mean, sx.covariance()?, &sy.mean, sy.covariance()?, cfg)?,
            };
            Ok((k, tf))
        })
        .collect()
}

/// Maps every source vector with label `k` to `H_k·x`.
pub fn center(source: &FeatureDataset, tfs: &BTreeMap<usize, TransferFunction>) -> Result<FeatureDataset> {
    let mut out = source.clone();
    for v in &mut out.vectors {
        let tf = tfs.get(&v.label).ok_or(Error::MissingTarget(v.label))?;
        if tf.h.ncols() != v.values.len() {
            return Err(Error::DimensionMismatch {
                expected: tf.h.ncols(),
                got: v.values.len(),
            });
        }
        v.values = &tf.h * &v.values;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub target: usize,
    /// Row-major `n×n`.
    pub h: Vec<f64>,
    pub theta: Vec<f64>,
    pub diagnostics: TransferDiagnostics,
}

/// JSON form of a set of transfer functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSet {
    pub n: usize,
    pub targets: Vec<TransferRecord>,
}

impl TransferSet {
    pub fn from_functions(tfs: &BTreeMap<usize, TransferFunction>) -> Self {
        let n = tfs.values().next().map_or(0, |t| t.h.nrows());
        Self {
            n,
            targets: tfs
                .values()
                .map(|t| TransferRecord {
                    target: t.target,
                    h: t.h.transpose().as_slice().to_vec(),
                    theta: t.theta.as_slice().to_vec(),
                    diagnostics: t.diagnostics.clone(),
                })
                .collect(),
        }
    }

    pub fn into_functions(self) -> Result<BTreeMap<usize, TransferFunction>> {
        let n = self.n;
        self.targets
            .into_iter()
            .map(|r| {
                if r.h.len() != n * n || r.theta.len() != n {
                    return Err(Error::Format(format!("transfer record {} has wrong size", r.target)));
                }
                Ok((
                    r.target,
                    TransferFunction {
                        target: r.target,
                        h: DMatrix::from_row_slice(n, n, &r.h),
                        theta: DVector::from_vec(r.theta),
                        diagnostics: r.diagnostics,
                    },
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }
    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn no_shrink() -> CenteringConfig {
        CenteringConfig {
            shrinkage: 0.0,
            ..CenteringConfig::default()
        }
    }

    fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn matched_means_give_zero_theta() {
        let sx = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let sy = DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 3.0]);
        let w = Whitener::from_covariance(&sy).unwrap();
        let sxi = sym_inv_sqrt(&sx).unwrap();
        let mu_x = DVector::from_vec(vec![1.0, -2.0]);
        let mu_y = &w.inverse * &sxi * &mu_x;
        let est = estimate_theta(&mu_x, &sxi, &mu_y, &w, 1e-8).unwrap();
        assert!(est.theta.amax() < 1e-12);
    }

    #[test]
    fn scalar_theta_cases() {
        let w = Whitener::from_covariance(&scalar(1.0)).unwrap();
        let est = estimate_theta(&vec1(2.0), &scalar(1.0), &vec1(1.0), &w, 1e-8).unwrap();
        assert_relative_eq!(est.theta[0], 1.0, epsilon = 1e-14);

        let sxi = sym_inv_sqrt(&scalar(4.0)).unwrap();
        let est = estimate_theta(&vec1(4.0), &sxi, &vec1(2.0), &w, 1e-8).unwrap();
        assert!(est.theta[0].abs() < 1e-14);
    }

    #[test]
    fn negative_theta_is_clamped_and_zero_denominators_error() {
        let w = Whitener::from_covariance(&scalar(1.0)).unwrap();
        let est = estimate_theta(&vec1(1.0), &scalar(1.0), &vec1(3.0), &w, 1e-8).unwrap();
        assert_eq!(est.theta[0], 0.0);
        assert_eq!(est.clamped, 1);
        assert!(matches!(
            estimate_theta(&vec1(0.0), &scalar(1.0), &vec1(3.0), &w, 1e-8),
            Err(Error::DegenerateMeanGeometry)
        ));
    }

    #[test]
    fn identical_moments_give_identity() {
        let s = DMatrix::<f64>::identity(3, 3);
        let mu = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let tf = estimate_h(0, &mu, &s, &mu, &s, &no_shrink()).unwrap();
        assert!(tf.theta.amax() < 1e-14);
        assert!((tf.h - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn scalar_transfer_matches_means() {
        // ratio is exactly 1 here, which the guard would treat as invalid
        let cfg = CenteringConfig {
            frobenius_guard: false,
            ..no_shrink()
        };
        let tf = estimate_h(0, &vec1(2.0), &scalar(1.0), &vec1(1.0), &scalar(1.0), &cfg).unwrap();
        assert_relative_eq!(tf.theta[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(tf.h[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(tf.h[(0, 0)] * 2.0, 1.0, epsilon = 1e-14);
        assert!(tf.is_exact());
        assert_relative_eq!(tf.diagnostics.frobenius_ratio, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn guard_resets_large_theta() {
        let tf = estimate_h(0, &vec1(2.0), &scalar(1.0), &vec1(1.0), &scalar(1.0), &no_shrink()).unwrap();
        assert!(tf.diagnostics.guard_reset);
        assert_relative_eq!(tf.h[(0, 0)], 1.0, epsilon = 1e-14);
        let tf = estimate_h(0, &vec1(4.0), &scalar(1.0), &vec1(1.0), &scalar(1.0), &no_shrink()).unwrap();
        assert!(tf.diagnostics.guard_reset);
        assert_eq!(tf.theta[0], 0.0);
        assert_relative_eq!(tf.h[(0, 0)], 1.0, epsilon = 1e-14);
        let off = CenteringConfig {
            frobenius_guard: false,
            ..no_shrink()
        };
        let tf = estimate_h(0, &vec1(4.0), &scalar(1.0), &vec1(1.0), &scalar(1.0), &off).unwrap();
        assert!(!tf.diagnostics.guard_reset);
        assert_relative_eq!(tf.h[(0, 0)] * 4.0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_theta_matches_covariance() {
        let mut rng = crate::rng::substream(1, "test", "cov", 0);
        for n in [2usize, 5, 9] {
            let sx = random_spd(n, &mut rng);
            let sy = random_spd(n, &mut rng);
            let tf = estimate_h_with_theta(0, &sx, &sy, &DVector::zeros(n), &no_shrink()).unwrap();
            let back = &tf.h * &sx * tf.h.transpose();
            assert!((back - &sy).norm() / sy.norm() < 1e-8);
            let direct = sym_sqrt(&sy).unwrap() * sym_inv_sqrt(&sx).unwrap();
            assert!((&tf.h - direct).norm() / tf.h.norm() < 1e-10);
        }
    }

    #[test]
    fn exact_branch_uses_true_root() {
        let mut rng = crate::rng::substream(2, "test", "exact", 0);
        let n = 4;
        let sx = random_spd(n, &mut rng);
        let sy = random_spd(n, &mut rng);
        let theta = DVector::from_element(n, 0.05);
        let exact = CenteringConfig {
            branch: Branch::Exact,
            ..no_shrink()
        };
        let tf = estimate_h_with_theta(0, &sx, &sy, &theta, &exact).unwrap();
        // H Σ_X Hᵀ + diag θ = Σ_Y exactly on the exact branch
        let mut back = &tf.h * &sx * tf.h.transpose();
        for i in 0..n {
            back[(i, i)] += theta[i];
        }
        assert!((back - &sy).norm() / sy.norm() < 1e-8);
    }

    #[test]
    fn estimate_all_per_target_and_missing() {
        let mk = |target, mean: Vec<f64>, cov: Option<DMatrix<f64>>, count| ClassMoments {
            target,
            mean: DVector::from_vec(mean),
            cov,
            count,
        };
        let i2 = DMatrix::<f64>::identity(2, 2);
        let src: BTreeMap<_, _> = (0..8)
            .map(|k| (k, mk(k, vec![1.0 + k as f64, 2.0], Some(i2.clone()), 10)))
            .collect();
        let dst = src.clone();
        let tfs = estimate_all(&src, &dst, &CenteringConfig::default()).unwrap();
        assert_eq!(tfs.len(), 8);

        let one_src: BTreeMap<_, _> = src.iter().take(1).map(|(k, v)| (*k, v.clone())).collect();
        let one = estimate_all(&one_src, &one_src, &CenteringConfig::default()).unwrap();
        let direct = estimate_h(0, &src[&0].mean, &i2, &src[&0].mean, &i2, &CenteringConfig::default()).unwrap();
        assert_eq!(one[&0], direct);

        let mut missing = dst.clone();
        missing.remove(&3);
        assert!(matches!(estimate_all(&src, &missing, &CenteringConfig::default()), Err(Error::MissingTarget(3))));

        // a one-trial destination class only works with pooled covariances
        let mut thin = dst.clone();
        thin.insert(5, mk(5, vec![6.0, 2.0], None, 1));
        assert!(estimate_all(&src, &thin, &CenteringConfig::default()).is_err());
        let shared = CenteringConfig {
            use_shared_covariance: true,
            ..CenteringConfig::default()
        };
        assert_eq!(estimate_all(&src, &thin, &shared).unwrap().len(), 8);
    }

    #[test]
    fn center_applies_per_label_maps() {
        let ds = FeatureDataset::from_rows(
            vec![(vec![1.0, 2.0], 0), (vec![3.0, -1.0], 1), (vec![0.5, 0.5], 0)],
            2,
            1,
        )
        .unwrap();
        let mut tfs: BTreeMap<usize, TransferFunction> =
            (0..2).map(|k| (k, TransferFunction::identity(k, 2))).collect();
        assert_eq!(center(&ds, &tfs).unwrap(), ds);

        tfs.get_mut(&1).unwrap().h = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        let c = center(&ds, &tfs).unwrap();
        assert_eq!(c.vectors[1].values.as_slice(), &[-1.0, 6.0]);
        assert_eq!(c.vectors[0], ds.vectors[0]);
        assert_eq!(c.vectors[1].label, 1);

        tfs.remove(&1);
        assert!(center(&ds, &tfs).is_err());
    }

    #[test]
    fn transfer_set_json_round_trip() {
        let tf = estimate_h(3, &vec1(2.0), &scalar(1.0), &vec1(1.0), &scalar(1.5), &no_shrink()).unwrap();
        let set = TransferSet::from_functions(&BTreeMap::from([(3, tf.clone())]));
        let json = serde_json::to_string(&set).unwrap();
        let back: TransferSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_functions().unwrap()[&3], tf);
    }

    /// Moments of a pair linked by the exact model `Y = H₀X + Z`, with `H₀`
    /// the exact-branch transfer function for `θ₀` scaled to `ratio`.
    fn linked_pair(n: usize, ratio: f64, seed: u64) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut rng = crate::rng::substream(seed, "test", "linked", n as u64);
        let sx = random_spd(n, &mut rng);
        let sy = random_spd(n, &mut rng);
        let mu_x = DVector::from_fn(n, |_, _| 3.0 + rng.random::<f64>());
        let w = Whitener::from_covariance(&sy).unwrap();
        let dir = DVector::from_fn(n, |_, _| 0.5 + rng.random::<f64>());
        let theta = &dir * (ratio / whitened_noise(&w, &dir).norm());
        let root = sym_sqrt(&(DMatrix::identity(n, n) - whitened_noise(&w, &theta))).unwrap();
        let h0 = &w.inverse * root * sym_inv_sqrt(&sx).unwrap();
        let mu_y = &h0 * &mu_x;
        (mu_x, sx, mu_y, sy, h0, theta)
    }

    fn unguarded() -> CenteringConfig {
        CenteringConfig {
            frobenius_guard: false,
            ..CenteringConfig::default()
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn estimated_h_matches_means(seed in proptest::prelude::any::<u64>(), pick in 0usize..3, shrink in 0.0f64..0.5) {
            let n = [2usize, 8, 24][pick];
            let mut rng = crate::rng::substream(seed, "test", "mean_match", 0);
            let sx = random_spd(n, &mut rng);
            let sy = random_spd(n, &mut rng);
            let mu_x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
            let mu_y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
            let cfg = CenteringConfig { shrinkage: shrink, ..unguarded() };
            if let Ok(tf) = estimate_h(0, &mu_x, &sx, &mu_y, &sy, &cfg) {
                let d = &tf.diagnostics;
                if d.theta_clamped == 0 && d.denominator_floor_hits == 0 {
                    let err = (&tf.h * &mu_x - &mu_y).norm() / mu_y.norm();
                    proptest::prop_assert!(err < 1e-8, "relative mean error {err}");
                }
            }
        }

        #[test]
        fn zero_theta_matches_covariance_exactly(seed in proptest::prelude::any::<u64>(), pick in 0usize..3) {
            let n = [2usize, 8, 24][pick];
            let mut rng = crate::rng::substream(seed, "test", "cov_match", 0);
            let sx = random_spd(n, &mut rng);
            let sy = random_spd(n, &mut rng);
            let tf = estimate_h_with_theta(0, &sx, &sy, &DVector::zeros(n), &no_shrink()).unwrap();
            let err = (&tf.h * &sx * tf.h.transpose() - &sy).norm() / sy.norm();
            proptest::prop_assert!(err < 1e-8, "relative covariance error {err}");
        }

        #[test]
        fn linked_means_are_matched_without_clamping(seed in proptest::prelude::any::<u64>(), pick in 0usize..3) {
            let n = [2usize, 8, 24][pick];
            let (mu_x, sx, mu_y, sy, _, _) = linked_pair(n, 0.05, seed);
            let tf = estimate_h(0, &mu_x, &sx, &mu_y, &sy, &CenteringConfig { shrinkage: 0.0, ..unguarded() }).unwrap();
            if tf.diagnostics.theta_clamped == 0 {
                let err = (&tf.h * &mu_x - &mu_y).norm() / mu_y.norm();
                proptest::prop_assert!(err < 1e-8, "relative mean error {err}");
            }
        }
    }

    #[test]
    fn neumann_error_is_second_order_in_the_noise_ratio() {
        let cfg = CenteringConfig {
            shrinkage: 0.0,
            ..unguarded()
        };
        for (n, seed) in [(2usize, 1u64), (8, 2), (8, 3)] {
            let err = |ratio: f64| {
                let (mu_x, sx, mu_y, sy, h0, theta) = linked_pair(n, ratio, seed);
                let tf = estimate_h(0, &mu_x, &sx, &mu_y, &sy, &cfg).unwrap();
                let mut back = &tf.h * &sx * tf.h.transpose();
                for i in 0..n {
                    back[(i, i)] += tf.theta[i];
                }
                let cov = (back - &sy).norm() / sy.norm();
                let h = (&tf.h - &h0).norm() / h0.norm();
                let th = (&tf.theta - &theta).norm() / theta.norm();
                (cov, h, th)
            };
            let (c1, h1, t1) = err(0.1);
            let (c2, h2, t2) = err(0.05);
            // halving the ratio should quarter a second-order error; allow slack
            assert!(c2 < 0.4 * c1, "n={n}: covariance error {c1:e} -> {c2:e}");
            assert!(h2 < 0.4 * h1, "n={n}: H error {h1:e} -> {h2:e}");
            assert!(t2 < 0.7 * t1, "n={n}: theta error {t1:e} -> {t2:e}");
            assert!(h1 < 0.1 && c1 < 0.1);
        }
    }

    #[test]
    fn h_is_invariant_to_a_common_rescaling() {
        let cfg = CenteringConfig::default();
        let (mu_x, sx, mu_y, sy, _, _) = linked_pair(8, 0.05, 9);
        let base = estimate_h(0, &mu_x, &sx, &mu_y, &sy, &cfg).unwrap();
        for s in [0.1, 10.0] {
            let tf = estimate_h(0, &(&mu_x * s), &(&sx * (s * s)), &(&mu_y * s), &(&sy * (s * s)), &cfg).unwrap();
            assert!((&tf.h - &base.h).norm() / base.h.norm() < 1e-9, "s = {s}");
            assert!((&tf.theta - &base.theta * (s * s)).norm() <= 1e-9 * (s * s) * base.theta.norm().max(1e-300));
            assert_eq!(tf.diagnostics.theta_clamped, base.diagnostics.theta_clamped);
        }
    }
}
