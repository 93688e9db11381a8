//! Artificially imbalanced binary problems and the ways of rebalancing them:
//! plain under/over-sampling, or filling the minority class with centered
//! trials from another subject.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centering::{center, estimate_all, CenteringConfig};
use crate::decode::{cross_subject_eval, CrossSubjectParams, EvalReport, LdaModel, PriorMode};
use crate::error::{Error, Result};
use crate::features::{FeatureDataset, FeatureVector};
use crate::moments::estimate_class_moments;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    UndersampleMajority,
    OversampleMinority,
    CenterFill,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::None,
        Strategy::UndersampleMajority,
        Strategy::OversampleMinority,
        Strategy::CenterFill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::UndersampleMajority => "undersample_majority",
            Strategy::OversampleMinority => "oversample_minority",
            Strategy::CenterFill => "center_fill",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    /// `(a, b)`: `a` is kept whole, `b` is under-sampled.
    pub target_pair: (usize, usize),
    /// `count_a / count_b` after under-sampling.
    pub imbalance_ratio: f64,
    pub num_random_subsets: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl ImbalanceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if self.target_pair.0 == self.target_pair.1 {
            return Err(Error::Config("target pair must name two different labels".into()));
        }
        Ok(())
    }
}

/// `max(1, ⌈count_a / R⌉)`.
pub fn minority_count(count_a: usize, ratio: f64) -> usize {
    ((count_a as f64 / ratio).ceil() as usize).max(1)
}

fn check_pair(data: &FeatureDataset, (a, b): (usize, usize)) -> Result<()> {
    for t in [a, b] {
        if t >= data.num_targets || data.class_indices(t).is_empty() {
            return Err(Error::MissingTarget(t));
        }
    }
    Ok(())
}

fn draw_without_replacement(pool: &[usize], take: usize, rng: &mut impl Rng) -> Vec<usize> {
    if take >= pool.len() {
        return pool.to_vec();
    }
    let mut out: Vec<usize> = sample(rng, pool.len(), take).into_iter().map(|j| pool[j]).collect();
    out.sort_unstable();
    out
}

/// Binary dataset holding all of class `a` and a random subset of class `b`
/// of size `max(1, ⌈count_a/R⌉)`.
pub fn make_imbalanced(data: &FeatureDataset, spec: &ImbalanceSpec, rng: &mut impl Rng) -> Result<FeatureDataset> {
    spec.validate()?;
    check_pair(data, spec.target_pair)?;
    let (a, b) = spec.target_pair;
    let ia = data.class_indices(a);
    let ib = data.class_indices(b);
    let keep = minority_count(ia.len(), spec.imbalance_ratio);
    if ib.len() < keep {
        return Err(Error::InsufficientTrials {
            target: b,
            count: ib.len(),
            required: keep,
        });
    }
    let mut idx = ia;
    idx.extend(draw_without_replacement(&ib, keep, rng));
    idx.sort_unstable();
    Ok(data.subset(&idx))
}

/// Applies one rebalancing strategy to a (binary) dataset.
///
/// The minority is whichever pair label has fewer trials; equal counts make
/// every strategy a no-op.
pub fn rebalance(
    data: &FeatureDataset,
    target_pair: (usize, usize),
    strategy: Strategy,
    source: Option<&FeatureDataset>,
    cfg: &CenteringConfig,
    rng: &mut impl Rng,
) -> Result<FeatureDataset> {
    check_pair(data, target_pair)?;
    let (a, b) = target_pair;
    let (ia, ib) = (data.class_indices(a), data.class_indices(b));
    let (major, minor, i_major, i_minor) = if ia.len() >= ib.len() {
        (a, b, ia, ib)
    } else {
        (b, a, ib, ia)
    };
    let deficit = i_major.len() - i_minor.len();
    if strategy == Strategy::CenterFill && source.is_none() {
        return Err(Error::Config("center_fill needs a source dataset".into()));
    }
    if deficit == 0 || strategy == Strategy::None {
        return Ok(data.clone());
    }
    let others: Vec<usize> = (0..data.len())
        .filter(|&i| data.vectors[i].label != major && data.vectors[i].label != minor)
        .collect();

    match strategy {
        Strategy::None => unreachable!(),
        Strategy::UndersampleMajority => {
            let mut idx = draw_without_replacement(&i_major, i_minor.len(), rng);
            idx.extend(i_minor);
            idx.extend(others);
            idx.sort_unstable();
            Ok(data.subset(&idx))
        }
        Strategy::OversampleMinority => {
            let mut out = data.clone();
            for _ in 0..deficit {
                let j = i_minor[rng.random_range(0..i_minor.len())];
                out.vectors.push(data.vectors[j].clone());
            }
            Ok(out)
        }
        Strategy::CenterFill => {
            let source = source.expect("checked above");
            if source.dim != data.dim {
                return Err(Error::DimensionMismatch {
                    expected: data.dim,
                    got: source.dim,
                });
            }
            let src_minor = source.class_indices(minor);
            if src_minor.is_empty() {
                return Err(Error::MissingTarget(minor));
            }
            let pair_only = |d: &FeatureDataset| {
                let idx: Vec<usize> = (0..d.len())
                    .filter(|&i| d.vectors[i].label == major || d.vectors[i].label == minor)
                    .collect();
                d.subset(&idx)
            };
            // the minority class is too small for its own covariance
            let shared = CenteringConfig {
                use_shared_covariance: true,
                ..*cfg
            };
            let tfs = estimate_all(
                &estimate_class_moments(&pair_only(source))?,
                &estimate_class_moments(&pair_only(data))?,
                &shared,
            )?;
            let picked = if src_minor.len() >= deficit {
                draw_without_replacement(&src_minor, deficit, rng)
            } else {
                (0..deficit)
                    .map(|_| src_minor[rng.random_range(0..src_minor.len())])
                    .collect()
            };
            let filler = center(&source.subset(&picked), &tfs)?;
            let mut out = data.clone();
            out.vectors.extend(filler.vectors.into_iter().map(|v| FeatureVector {
                values: v.values,
                label: minor,
            }));
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImbalanceStudy {
    pub target_pair: (usize, usize),
    pub ratios: Vec<f64>,
    pub num_random_subsets: usize,
    pub strategies: Vec<Strategy>,
    /// Per-class fraction of destination trials held out for testing.
    pub holdout_fraction: f64,
    pub shrinkage: f64,
    pub priors: PriorMode,
    pub seed: u64,
}

impl Default for ImbalanceStudy {
    fn default() -> Self {
        Self {
            target_pair: (0, 4),
            ratios: vec![100.0],
            num_random_subsets: 1000,
            strategies: Strategy::ALL.to_vec(),
            holdout_fraction: 0.3,
            shrinkage: crate::decode::DEFAULT_SHRINKAGE,
            priors: PriorMode::Empirical,
            seed: 0,
        }
    }
}

impl ImbalanceStudy {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.strategies.is_empty() || self.num_random_subsets == 0 {
            return Err(Error::Config("imbalance study grid is empty".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        for &r in &self.ratios {
            ImbalanceSpec {
                target_pair: self.target_pair,
                imbalance_ratio: r,
                num_random_subsets: self.num_random_subsets,
                strategy: Strategy::None,
                seed: self.seed,
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRecord {
    pub ratio: f64,
    pub repetition: usize,
    pub strategy: Strategy,
    /// Minority trials in the training set before rebalancing.
    pub minority_trials: usize,
    pub overall_accuracy: f64,
    /// Accuracy on the under-sampled label `b`.
    pub minority_accuracy: f64,
    pub majority_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub ratio: f64,
    pub strategy: Strategy,
    pub repetitions: usize,
    pub minority: Quartiles,
    pub majority: Quartiles,
    pub overall: Quartiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceResults {
    pub study: ImbalanceStudy,
    /// Ordered by (ratio, repetition, strategy position in the study).
    pub records: Vec<ImbalanceRecord>,
    pub summaries: Vec<StrategySummary>,
}

impl ImbalanceResults {
    pub const CSV_HEADER: &'static str =
        "ratio,repetition,strategy,minority_trials,overall_accuracy,minority_accuracy,majority_accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                r.ratio,
                r.repetition,
                r.strategy.name(),
                r.minority_trials,
                r.overall_accuracy,
                r.minority_accuracy,
                r.majority_accuracy
            ));
        }
        out
    }

    pub fn records_for(&self, ratio: f64, strategy: Strategy) -> Vec<&ImbalanceRecord> {
        self.records
            .iter()
            .filter(|r| r.ratio == ratio && r.strategy == strategy)
            .collect()
    }

    pub fn summary(&self, ratio: f64, strategy: Strategy) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.ratio == ratio && s.strategy == strategy)
    }
}

/// Per-class holdout of `⌈fraction·n_k⌉` trials (at least one stays in
/// training). Returns `(train, test)` index lists.
fn stratified_holdout(data: &FeatureDataset, labels: &[usize], fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &k in labels {
        let idx = data.class_indices(k);
        let n_test = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len().saturating_sub(1));
        let held = draw_without_replacement(&idx, n_test, rng);
        let mut h = held.iter().peekable();
        for i in idx {
            if h.peek() == Some(&&i) {
                h.next();
                test.push(i);
            } else {
                train.push(i);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// For each ratio and repetition: a fresh stratified holdout, a fresh
/// minority subset of the training part, then every strategy on that same
/// subset, scored on the holdout.
///
/// Holdouts and subsets depend only on the repetition index, so strategies
/// are paired within a repetition and ratios are paired across it.
pub fn run_imbalance_study(
    dest: &FeatureDataset,
    source: Option<&FeatureDataset>,
    study: &ImbalanceStudy,
    cfg: &CenteringConfig,
) -> Result<ImbalanceResults> {
    study.validate()?;
    check_pair(dest, study.target_pair)?;
    let (a, b) = study.target_pair;
    let jobs: Vec<(usize, usize)> = (0..study.ratios.len())
        .flat_map(|ri| (0..study.num_random_subsets).map(move |rep| (ri, rep)))
        .collect();

    let per_job = jobs
        .par_iter()
        .map(|&(ri, rep)| {
            let ratio = study.ratios[ri];
            let rep_u = rep as u64;
            let mut split_rng = substream(study.seed, "imbalance", "holdout", rep_u);
            let (train, test) = stratified_holdout(dest, &[a, b], study.holdout_fraction, &mut split_rng);
            let spec = ImbalanceSpec {
                target_pair: study.target_pair,
                imbalance_ratio: ratio,
                num_random_subsets: study.num_random_subsets,
                strategy: Strategy::None,
                seed: study.seed,
            };
            let mut subset_rng = substream(study.seed, "imbalance", "subset", rep_u);
            let imbalanced = make_imbalanced(&dest.subset(&train), &spec, &mut subset_rng)?;
            let minority_trials = imbalanced.class_indices(b).len();
            let test = dest.subset(&test);

            study
                .strategies
                .iter()
                .map(|&strategy| {
                    let mut rng = substream(study.seed, "imbalance", strategy.name(), rep_u);
                    let train = rebalance(&imbalanced, study.target_pair, strategy, source, cfg, &mut rng)?;
                    let model = LdaModel::fit(&train, study.shrinkage, study.priors)?;
                    let pairs = test
                        .vectors
                        .iter()
                        .map(|v| Ok((v.label, model.predict(&v.values)?)))
                        .collect::<Result<Vec<_>>>()?;
                    let r = EvalReport::from_predictions(dest.num_targets, &pairs, study.seed, study.shrinkage, study.priors);
                    Ok(ImbalanceRecord {
                        ratio,
                        repetition: rep,
                        strategy,
                        minority_trials,
                        overall_accuracy: r.overall_accuracy,
                        minority_accuracy: r.per_target_accuracy[b].unwrap_or(f64::NAN),
                        majority_accuracy: r.per_target_accuracy[a].unwrap_or(f64::NAN),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<ImbalanceRecord> = per_job.into_iter().flatten().collect();

    let mut groups: BTreeMap<(usize, usize), Vec<&ImbalanceRecord>> = BTreeMap::new();
    for r in &records {
        let ri = study.ratios.iter().position(|&x| x == r.ratio).unwrap_or(0);
        let si = study.strategies.iter().position(|&s| s == r.strategy).unwrap_or(0);
        groups.entry((ri, si)).or_default().push(r);
    }
    let summaries = groups
        .into_iter()
        .map(|((ri, si), rs)| {
            let col = |f: fn(&ImbalanceRecord) -> f64| Quartiles::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            StrategySummary {
                ratio: study.ratios[ri],
                strategy: study.strategies[si],
                repetitions: rs.len(),
                minority: col(|r| r.minority_accuracy),
                majority: col(|r| r.majority_accuracy),
                overall: col(|r| r.overall_accuracy),
            }
        })
        .collect();
    Ok(ImbalanceResults {
        study: study.clone(),
        records,
        summaries,
    })
}

/// Exhaustive search over candidate sources: centered cross-subject accuracy
/// for each, and the index of the best (first on ties).
pub fn select_best_source(
    dest: &FeatureDataset,
    candidates: &[FeatureDataset],
    cfg: &CenteringConfig,
    params: &CrossSubjectParams,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate sources".into()));
    }
    let scores = candidates
        .par_iter()
        .map(|s| cross_subject_eval(s, dest, cfg, params).map(|r| r.centered.overall_accuracy))
        .collect::<Result<Vec<_>>>()?;
    let best = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    Ok((best, scores))
}
