//! Class-conditional moments and the symmetric-matrix functional calculus
//! (square roots, inverse square roots, shrinkage, pooling) used by the
//! transfer-function estimator and the LDA decoder.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::features::FeatureDataset;

/// Relative eigenvalue floor: a covariance counts as singular when its
/// smallest eigenvalue is at or below `PD_RELATIVE_FLOOR * trace / n`.
pub const PD_RELATIVE_FLOOR: f64 = 1e-10;

/// Sample mean and unbiased sample covariance of one target class.
///
/// `cov` is `None` when fewer than two trials were available.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMoments {
    pub target: usize,
    pub mean: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
    pub count: usize,
}

impl ClassMoments {
    pub fn from_vectors<'a, I>(target: usize, vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DVector<f64>>,
    {
        let vectors: Vec<&DVector<f64>> = vectors.into_iter().collect();
        let count = vectors.len();
        if count == 0 {
            return Err(Error::InsufficientTrials {
                target,
                count: 0,
                required: 1,
            });
        }
        let dim = vectors[0].len();
        let mut mean = DVector::zeros(dim);
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            mean += *v;
        }
        mean /= count as f64;

        let cov = if count >= 2 {
            let mut centered = DMatrix::zeros(dim, count);
            for (j, v) in vectors.iter().enumerate() {
                centered.set_column(j, &(*v - &mean));
            }
            let scatter = &centered * centered.transpose();
            Some(symmetrize(&(scatter / (count as f64 - 1.0))))
        } else {
            None
        };
        Ok(Self {
            target,
            mean,
            cov,
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Result<&DMatrix<f64>> {
        self.cov
            .as_ref()
            .ok_or(Error::CovarianceUnavailable(self.target))
    }

    /// True when the covariance is missing or not positive definite
    /// (before any regularization).
    pub fn is_singular(&self) -> bool {
        match &self.cov {
            None => true,
            Some(c) => {
                let eig = SymmetricEigen::new(symmetrize(c));
                eig.eigenvalues.min() <= pd_floor(c)
            }
        }
    }

    /// Moments of the same sample with one member `x` removed (exact rank-one
    /// downdate of the scatter matrix).
    pub fn without(&self, x: &DVector<f64>) -> Result<Self> {
        if self.count < 2 {
            return Err(Error::InsufficientTrials {
                target: self.target,
                count: self.count,
                required: 2,
            });
        }
        let c = self.count as f64;
        let mean = (&self.mean * c - x) / (c - 1.0);
        let remaining = self.count - 1;
        let cov = if remaining >= 2 {
            let cov = self.covariance()?;
            let d = x - &self.mean;
            let scatter = cov * (c - 1.0) - (&d * d.transpose()) * (c / (c - 1.0));
            Some(symmetrize(&(scatter / (c - 2.0))))
        } else {
            None
        };
        Ok(Self {
            target: self.target,
            mean,
            cov,
            count: remaining,
        })
    }

    /// Moments of `H·x` for `x` drawn from this class.
    pub fn transformed(&self, h: &DMatrix<f64>) -> Self {
        Self {
            target: self.target,
            mean: h * &self.mean,
            cov: self
                .cov
                .as_ref()
                .map(|c| symmetrize(&(h * c * h.transpose()))),
            count: self.count,
        }
    }
}

pub fn estimate_moments(data: &FeatureDataset, target: usize) -> Result<ClassMoments> {
    ClassMoments::from_vectors(target, data.class_vectors(target))
}

/// Moments for every target that has at least one trial, keyed by target.
pub fn estimate_class_moments(data: &FeatureDataset) -> Result<BTreeMap<usize, ClassMoments>> {
    let mut out = BTreeMap::new();
    for (target, count) in data.class_counts().into_iter().enumerate() {
        if count > 0 {
            out.insert(target, estimate_moments(data, target)?);
        }
    }
    Ok(out)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn pd_floor(sigma: &DMatrix<f64>) -> f64 {
    let n = sigma.nrows().max(1) as f64;
    PD_RELATIVE_FLOOR * sigma.trace() / n
}

/// Convex shrinkage toward the trace-scaled identity:
/// `(1 − λ)Σ + λ·(tr Σ / n)·I`.
pub fn shrink(sigma: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!(
            "shrinkage {lambda} outside [0, 1]"
        )));
    }
    if lambda == 0.0 {
        return Ok(sigma.clone());
    }
    let n = sigma.nrows();
    let scale = sigma.trace() / n as f64;
    let mut out = sigma * (1.0 - lambda);
    for i in 0..n {
        out[(i, i)] += lambda * scale;
    }
    Ok(out)
}

/// Applies a scalar function to the spectrum of a symmetric matrix after
/// checking positive definiteness against the relative floor.
fn spectral_map(sigma: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let sym = symmetrize(sigma);
    let eig = SymmetricEigen::new(sym);
    let floor = pd_floor(sigma);
    let min = eig.eigenvalues.min();
    if !(min > floor) || !min.is_finite() {
        return Err(Error::SingularCovariance {
            min_eigenvalue: min,
            floor,
        });
    }
    Ok(compose(&eig, f))
}

fn compose(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = f(lambda);
        scaled.column_mut(j).scale_mut(s);
    }
    symmetrize(&(scaled * v.transpose()))
}

/// Principal square root of a symmetric positive-definite matrix.
pub fn sym_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(sigma, f64::sqrt)
}

/// Inverse of the principal square root.
pub fn sym_inv_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(sigma, |l| 1.0 / l.sqrt())
}

/// Matrix exponential of a symmetric matrix (always symmetric PD).
pub fn sym_exp(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(s));
    compose(&eig, f64::exp)
}

/// Symmetric whitening transform `W = Σ^{-1/2}` together with its inverse.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub forward: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
}

impl Whitener {
    pub fn from_covariance(sigma: &DMatrix<f64>) -> Result<Self> {
        let sym = symmetrize(sigma);
        let eig = SymmetricEigen::new(sym);
        let floor = pd_floor(sigma);
        let min = eig.eigenvalues.min();
        if !(min > floor) || !min.is_finite() {
            return Err(Error::SingularCovariance {
                min_eigenvalue: min,
                floor,
            });
        }
        Ok(Self {
            forward: compose(&eig, |l| 1.0 / l.sqrt()),
            inverse: compose(&eig, f64::sqrt),
        })
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.forward * x
    }
}

/// Prior-weighted pooled covariance `Σ_k (n_k / Σ n) Σ_k`.
///
/// Classes without a covariance (fewer than two trials) are left out of both
/// the sum and the weights.
pub fn shared_covariance<'a, I>(moments: I) -> Result<DMatrix<f64>>
where
    I: IntoIterator<Item = &'a ClassMoments>,
{
    let mut total = 0usize;
    let mut acc: Option<DMatrix<f64>> = None;
    for m in moments {
        if let Some(c) = &m.cov {
            let weighted = c * m.count as f64;
            acc = Some(match acc {
                None => weighted,
                Some(a) => {
                    if a.shape() != weighted.shape() {
                        return Err(Error::DimensionMismatch {
                            expected: a.nrows(),
                            got: weighted.nrows(),
                        });
                    }
                    a + weighted
                }
            });
            total += m.count;
        }
    }
    match acc {
        Some(a) => Ok(symmetrize(&(a / total as f64))),
        None => Err(Error::InvalidInput(
            "no class has a covariance (every class has fewer than 2 trials)".into(),
        )),
    }
}
