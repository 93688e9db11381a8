//! Shrinkage LDA, cross-validation, and the cross-subject evaluation loop.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centering::{estimate_all, estimate_h, CenteringConfig, TransferFunction};
use crate::error::{Error, Result};
use crate::features::FeatureDataset;
use crate::moments::{estimate_class_moments, shared_covariance, shrink, sym_inv_sqrt, ClassMoments};
use crate::rng::substream;

/// Default covariance shrinkage for the decoder.
pub const DEFAULT_SHRINKAGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    Empirical,
    Uniform,
}

/// Linear discriminant with a shared, shrunk covariance, stored in whitened
/// form so prediction is nearest-mean plus log prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    /// `K × n`; rows of absent classes are zero.
    pub class_means: DMatrix<f64>,
    /// `Σ^{-1/2}` of the shrunk pooled covariance.
    pub shared_cov_inv_factor: DMatrix<f64>,
    /// `-inf` for classes absent from training.
    pub log_priors: Vec<f64>,
    whitened_means: Vec<DVector<f64>>,
}

impl LdaModel {
    pub fn fit(data: &FeatureDataset, shrinkage: f64, priors: PriorMode) -> Result<Self> {
        let moments = estimate_class_moments(data)?;
        Self::from_moments(&moments, data.num_targets, shrinkage, priors)
    }

    /// Fits from per-class sample moments; equivalent to fitting on the
    /// samples that produced them.
    pub fn from_moments(
        moments: &BTreeMap<usize, ClassMoments>,
        num_targets: usize,
        shrinkage: f64,
        priors: PriorMode,
    ) -> Result<Self> {
        if moments.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "LDA needs at least 2 classes, got {}",
                moments.len()
            )));
        }
        if let Some(&k) = moments.keys().find(|&&k| k >= num_targets) {
            return Err(Error::InvalidInput(format!("label {k} outside [0, {num_targets})")));
        }
        let n = moments.values().next().map_or(0, |m| m.dim());
        // with no class holding two trials there is nothing to pool, and the
        // model degrades to Euclidean nearest-mean
        let w = if moments.values().any(|m| m.cov.is_some()) {
            sym_inv_sqrt(&shrink(&shared_covariance(moments.values())?, shrinkage)?)?
        } else {
            DMatrix::identity(n, n)
        };

        let total: usize = moments.values().map(|m| m.count).sum();
        let mut class_means = DMatrix::zeros(num_targets, n);
        let mut log_priors = vec![f64::NEG_INFINITY; num_targets];
        let mut whitened_means = vec![DVector::zeros(n); num_targets];
        for (&k, m) in moments {
            class_means.set_row(k, &m.mean.transpose());
            whitened_means[k] = &w * &m.mean;
            log_priors[k] = match priors {
                PriorMode::Empirical => (m.count as f64 / total as f64).ln(),
                PriorMode::Uniform => -(moments.len() as f64).ln(),
            };
        }
        Ok(Self {
            class_means,
            shared_cov_inv_factor: w,
            log_priors,
            whitened_means,
        })
    }

    pub fn num_targets(&self) -> usize {
        self.log_priors.len()
    }

    pub fn dim(&self) -> usize {
        self.shared_cov_inv_factor.nrows()
    }

    /// `δ_k(x) = −½‖W(x − μ_k)‖² + log π_k`. This differs from the usual
    /// linear form only by a term common to all classes.
    pub fn discriminants(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature vector has non-finite entries".into()));
        }
        let wx = &self.shared_cov_inv_factor * x;
        Ok(self
            .whitened_means
            .iter()
            .zip(&self.log_priors)
            .map(|(m, lp)| {
                if lp.is_finite() {
                    -0.5 * (&wx - m).norm_squared() + lp
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }

    /// Argmax of the discriminants; ties go to the lowest class index.
    pub fn predict(&self, x: &DVector<f64>) -> Result<usize> {
        let d = self.discriminants(x)?;
        let mut best = 0;
        for k in 1..d.len() {
            if d[k] > d[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

/// Accuracy and confusion counts for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// `None` for targets without test trials.
    pub per_target_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_test: usize,
    pub seed: u64,
    pub shrinkage: f64,
    pub priors: PriorMode,
}

impl EvalReport {
    /// Builds a report from `(true, predicted)` label pairs.
    pub fn from_predictions(
        num_targets: usize,
        pairs: &[(usize, usize)],
        seed: u64,
        shrinkage: f64,
        priors: PriorMode,
    ) -> Self {
        let mut confusion = vec![vec![0usize; num_targets]; num_targets];
        for &(t, p) in pairs {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_targets).map(|k| confusion[k][k]).sum();
        let per_target_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[k] as f64 / total as f64)
            })
            .collect();
        Self {
            overall_accuracy: if pairs.is_empty() {
                0.0
            } else {
                correct as f64 / pairs.len() as f64
            },
            per_target_accuracy,
            confusion,
            n_test: pairs.len(),
            seed,
            shrinkage,
            priors,
        }
    }

    pub fn num_targets(&self) -> usize {
        self.confusion.len()
    }

    pub fn test_counts(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn csv_header(num_targets: usize) -> String {
        let mut cols = vec![
            "experiment_id".to_string(),
            "config_hash".into(),
            "seed".into(),
            "n_test".into(),
            "overall_accuracy".into(),
        ];
        cols.extend((0..num_targets).map(|k| format!("acc_target_{k}")));
        cols.join(",")
    }

    pub fn csv_row(&self, experiment_id: &str, config_hash: &str) -> String {
        let mut cols = vec![
            experiment_id.to_string(),
            config_hash.to_string(),
            self.seed.to_string(),
            self.n_test.to_string(),
            format!("{:.6}", self.overall_accuracy),
        ];
        cols.extend(
            self.per_target_accuracy
                .iter()
                .map(|a| a.map_or(String::new(), |v| format!("{v:.6}"))),
        );
        cols.join(",")
    }
}

/// How held-out destination trials are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Split {
    /// Leave-one-out (the reference).
    #[default]
    Loo,
    /// Stratified k-fold; the fold assignment is seeded.
    KFold { folds: usize },
}

fn require_two_per_class(data: &FeatureDataset) -> Result<()> {
    for (k, &c) in data.class_counts().iter().enumerate() {
        if c == 1 {
            return Err(Error::InsufficientTrials {
                target: k,
                count: 1,
                required: 2,
            });
        }
    }
    Ok(())
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(data: &FeatureDataset, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > data.len() {
        return Err(Error::Config(format!(
            "fold count {folds} outside [2, {}]",
            data.len()
        )));
    }
    let mut rng = substream(seed, "decode", "folds", 0);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for k in 0..data.num_targets {
        let mut idx = data.class_indices(k);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        for i in idx {
            out[next % folds].push(i);
            next += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Leave-one-out accuracy of LDA on one dataset; deterministic.
pub fn loo_cv(data: &FeatureDataset, shrinkage: f64, priors: PriorMode) -> Result<EvalReport> {
    require_two_per_class(data)?;
    let moments = estimate_class_moments(data)?;
    let pairs = data
        .vectors
        .par_iter()
        .map(|v| {
            let mut m = moments.clone();
            let held = m[&v.label].without(&v.values)?;
            m.insert(v.label, held);
            let model = LdaModel::from_moments(&m, data.num_targets, shrinkage, priors)?;
            Ok((v.label, model.predict(&v.values)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_predictions(data.num_targets, &pairs, 0, shrinkage, priors))
}

pub fn kfold_cv(
    data: &FeatureDataset,
    folds: usize,
    shrinkage: f64,
    priors: PriorMode,
    seed: u64,
) -> Result<EvalReport> {
    require_two_per_class(data)?;
    let assignment = stratified_folds(data, folds, seed)?;
    let per_fold = assignment
        .par_iter()
        .map(|test| {
            let model = LdaModel::fit(&data.subset(&complement(data.len(), test)), shrinkage, priors)?;
            test.iter()
                .map(|&i| {
                    let v = &data.vectors[i];
                    Ok((v.label, model.predict(&v.values)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = per_fold.into_iter().flatten().collect();
    Ok(EvalReport::from_predictions(data.num_targets, &pairs, seed, shrinkage, priors))
}

/// Evaluates with the configured split.
pub fn cross_validate(
    data: &FeatureDataset,
    split: Split,
    shrinkage: f64,
    priors: PriorMode,
    seed: u64,
) -> Result<EvalReport> {
    match split {
        Split::Loo => loo_cv(data, shrinkage, priors).map(|r| EvalReport { seed, ..r }),
        Split::KFold { folds } => kfold_cv(data, folds, shrinkage, priors, seed),
    }
}

fn complement(len: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(len - sorted.len());
    let mut j = 0;
    for i in 0..len {
        if j < sorted.len() && sorted[j] == i {
            j += 1;
        } else {
            out.push(i);
        }
    }
    out
}

/// Uniform random guessing, the chance-level baseline.
pub fn random_choice(data: &FeatureDataset, seed: u64) -> EvalReport {
    let mut rng = substream(seed, "decode", "random_choice", 0);
    let pairs: Vec<_> = data
        .vectors
        .iter()
        .map(|v| (v.label, rng.random_range(0..data.num_targets)))
        .collect();
    EvalReport::from_predictions(data.num_targets, &pairs, seed, 0.0, PriorMode::Uniform)
}

/// Per-class draw of `⌈α·n_k⌉` trials without replacement; indices sorted.
pub fn stratified_draw(data: &FeatureDataset, alpha: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let mut out = Vec::new();
    for k in 0..data.num_targets {
        let idx = data.class_indices(k);
        if idx.is_empty() {
            continue;
        }
        let take = ((alpha * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
        if take == idx.len() {
            out.extend(idx);
        } else {
            out.extend(sample(rng, idx.len(), take).into_iter().map(|j| idx[j]));
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossSubjectParams {
    /// Proportion of source trials in each of the two independent draws.
    pub alpha: f64,
    pub shrinkage: f64,
    pub priors: PriorMode,
    pub split: Split,
    pub seed: u64,
}

impl Default for CrossSubjectParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            shrinkage: DEFAULT_SHRINKAGE,
            priors: PriorMode::Empirical,
            split: Split::Loo,
            seed: 0,
        }
    }
}

/// Transfer-function diagnostics summed over the full-data estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CenteringSummary {
    pub max_frobenius_ratio: f64,
    pub theta_clamped: usize,
    pub denominator_floor_hits: usize,
    pub guard_resets: usize,
    pub max_condition_number: f64,
}

impl CenteringSummary {
    pub fn from_functions(tfs: &BTreeMap<usize, TransferFunction>) -> Self {
        let mut s = Self::default();
        for tf in tfs.values() {
            let d = &tf.diagnostics;
            s.max_frobenius_ratio = s.max_frobenius_ratio.max(d.frobenius_ratio);
            s.theta_clamped += d.theta_clamped;
            s.denominator_floor_hits += d.denominator_floor_hits;
            s.guard_resets += usize::from(d.guard_reset);
            s.max_condition_number = s.max_condition_number.max(d.condition_number);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSubjectReport {
    /// LDA trained on centered source data.
    pub centered: EvalReport,
    /// LDA trained on raw source data.
    pub uncentered: EvalReport,
    pub centering: CenteringSummary,
}

/// Centered training moments: class `k` of the training draw mapped by `H_k`.
fn centered_model(
    train: &BTreeMap<usize, ClassMoments>,
    tfs: &BTreeMap<usize, TransferFunction>,
    num_targets: usize,
    p: &CrossSubjectParams,
) -> Result<LdaModel> {
    let mapped = train
        .iter()
        .map(|(&k, m)| {
            let tf = tfs.get(&k).ok_or(Error::MissingTarget(k))?;
            Ok((k, m.transformed(&tf.h)))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    LdaModel::from_moments(&mapped, num_targets, p.shrinkage, p.priors)
}

/// Step 1: transfer functions from source draw 1 and the destination
/// trials outside the test fold. Step 2: center source draw 2. Step 3: train
/// LDA on it and decode the held-out destination trials.
///
/// The two source draws are made once per evaluation from the seed; each
/// held-out destination trial is excluded from its own transfer-function
/// estimate.
pub fn cross_subject_eval(
    source: &FeatureDataset,
    dest: &FeatureDataset,
    cfg: &CenteringConfig,
    p: &CrossSubjectParams,
) -> Result<CrossSubjectReport> {
    if source.dim != dest.dim {
        return Err(Error::DimensionMismatch {
            expected: dest.dim,
            got: source.dim,
        });
    }
    if source.num_targets != dest.num_targets {
        return Err(Error::InvalidInput(format!(
            "source has {} targets, destination {}",
            source.num_targets, dest.num_targets
        )));
    }
    if !(p.alpha > 0.0 && p.alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", p.alpha)));
    }
    cfg.validate()?;
    require_two_per_class(dest)?;
    let k = dest.num_targets;

    let draw1 = stratified_draw(source, p.alpha, &mut substream(p.seed, "decode", "source_draw", 1))?;
    let draw2 = stratified_draw(source, p.alpha, &mut substream(p.seed, "decode", "source_draw", 2))?;
    let src_est = estimate_class_moments(&source.subset(&draw1))?;
    let src_train = estimate_class_moments(&source.subset(&draw2))?;
    let dest_all = estimate_class_moments(dest)?;

    let base = estimate_all(&src_est, &dest_all, cfg)?;
    let centering = CenteringSummary::from_functions(&base);
    let raw_model = LdaModel::from_moments(&src_train, k, p.shrinkage, p.priors)?;

    let (centered_pairs, raw_pairs): (Vec<_>, Vec<_>) = match p.split {
        Split::Loo => {
            let per_trial = dest
                .vectors
                .par_iter()
                .map(|v| {
                    let mut d = dest_all.clone();
                    d.insert(v.label, d[&v.label].without(&v.values)?);
                    let tfs = if cfg.use_shared_covariance {
                        estimate_all(&src_est, &d, cfg)?
                    } else {
                        let mut tfs = base.clone();
                        let (sx, sy) = (&src_est[&v.label], &d[&v.label]);
                        let tf = estimate_h(v.label, &sx.mean, sx.covariance()?, &sy.mean, sy.covariance()?, cfg)?;
                        tfs.insert(v.label, tf);
                        tfs
                    };
                    let model = centered_model(&src_train, &tfs, k, p)?;
                    Ok((
                        (v.label, model.predict(&v.values)?),
                        (v.label, raw_model.predict(&v.values)?),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            per_trial.into_iter().unzip()
        }
        Split::KFold { folds } => {
            let assignment = stratified_folds(dest, folds, p.seed)?;
            let per_fold = assignment
                .par_iter()
                .map(|test| {
                    let d = estimate_class_moments(&dest.subset(&complement(dest.len(), test)))?;
                    let tfs = estimate_all(&src_est, &d, cfg)?;
                    let model = centered_model(&src_train, &tfs, k, p)?;
                    test.iter()
                        .map(|&i| {
                            let v = &dest.vectors[i];
                            Ok((
                                (v.label, model.predict(&v.values)?),
                                (v.label, raw_model.predict(&v.values)?),
                            ))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            per_fold.into_iter().flatten().unzip()
        }
    };
    Ok(CrossSubjectReport {
        centered: EvalReport::from_predictions(k, &centered_pairs, p.seed, p.shrinkage, p.priors),
        uncentered: EvalReport::from_predictions(k, &raw_pairs, p.seed, p.shrinkage, p.priors),
        centering,
    })
}
