//! Sequence-space projection and the Pinsker/truncation estimators.
//!
//! Signals are expanded in the real orthonormal trigonometric basis
//! `[DC, cos₁, sin₁, cos₂, sin₂, …]` (a lone Nyquist cosine closes the
//! sequence when the length is even), so Parseval holds exactly and the
//! paired Sobolev weights `a_{2k} = a_{2k+1}` line up with each cos/sin pair.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::Trial;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCoefficients {
    /// Real coefficients; entries beyond `coeffs.len()` are implicitly zero.
    pub coeffs: Vec<f64>,
    /// Length of the originating time-domain signal.
    pub len: usize,
    pub sample_rate_hz: f64,
}

impl SequenceCoefficients {
    pub fn zeros(len: usize, sample_rate_hz: f64) -> Self {
        Self {
            coeffs: vec![0.0; len],
            len,
            sample_rate_hz,
        }
    }

    pub fn get(&self, index: usize) -> f64 {
        self.coeffs.get(index).copied().unwrap_or(0.0)
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }
}

/// Frequency band of the 0-based coefficient index: 0 for DC, `k` for the
/// cos/sin pair at `k·ν_S/T`.
pub fn band_of(index: usize) -> usize {
    (index + 1) / 2
}

/// Largest admissible number of retained bands for a length-`len` signal.
pub fn max_bands(len: usize) -> usize {
    (len + 1) / 2
}

/// Low-pass cut-off implied by keeping `bands` frequencies: `(L−1)·ν_S/T`.
pub fn cutoff_hz(bands: usize, len: usize, sample_rate_hz: f64) -> f64 {
    (bands.saturating_sub(1)) as f64 * sample_rate_hz / len as f64
}

/// Number of retained bands whose cut-off is closest to `cutoff_hz`.
pub fn bands_for_cutoff(cutoff_hz: f64, len: usize, sample_rate_hz: f64) -> usize {
    (cutoff_hz * len as f64 / sample_rate_hz).round() as usize + 1
}

/// Planned forward/inverse transforms for one signal length.
pub struct Projector {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Projector {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len.max(1)),
            inverse: planner.plan_fft_inverse(len.max(1)),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn project(&self, signal: &[f64], sample_rate_hz: f64) -> Result<SequenceCoefficients> {
        let t = self.len;
        if t == 0 || signal.len() != t {
            return Err(Error::DimensionMismatch {
                expected: t,
                got: signal.len(),
            });
        }
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample in signal".into()));
        }
        let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);

        let tf = t as f64;
        let pair_scale = (2.0 / tf).sqrt();
        let mut coeffs = Vec::with_capacity(t);
        coeffs.push(buf[0].re / tf.sqrt());
        for k in 1..=(t - 1) / 2 {
            coeffs.push(pair_scale * buf[k].re);
            coeffs.push(-pair_scale * buf[k].im);
        }
        if t % 2 == 0 {
            coeffs.push(buf[t / 2].re / tf.sqrt());
        }
        Ok(SequenceCoefficients {
            coeffs,
            len: t,
            sample_rate_hz,
        })
    }

    pub fn reconstruct(&self, c: &SequenceCoefficients) -> Result<Vec<f64>> {
        let t = self.len;
        if c.len != t {
            return Err(Error::DimensionMismatch {
                expected: t,
                got: c.len,
            });
        }
        let tf = t as f64;
        let half = (tf / 2.0).sqrt();
        let mut buf = vec![Complex::new(0.0, 0.0); t];
        buf[0] = Complex::new(c.get(0) * tf.sqrt(), 0.0);
        for k in 1..=(t - 1) / 2 {
            let z = Complex::new(c.get(2 * k - 1) * half, -c.get(2 * k) * half);
            buf[k] = z;
            buf[t - k] = z.conj();
        }
        if t % 2 == 0 {
            buf[t / 2] = Complex::new(c.get(t - 1) * tf.sqrt(), 0.0);
        }
        self.inverse.process(&mut buf);
        Ok(buf.iter().map(|z| z.re / tf).collect())
    }
}

/// Orthonormal real-trigonometric projection of a signal.
pub fn project(signal: &[f64], sample_rate_hz: f64) -> Result<SequenceCoefficients> {
    if signal.is_empty() {
        return Err(Error::InvalidInput("empty signal".into()));
    }
    Projector::new(signal.len()).project(signal, sample_rate_hz)
}

/// Inverse of [`project`]; missing trailing coefficients are treated as zero.
pub fn reconstruct(c: &SequenceCoefficients) -> Result<Vec<f64>> {
    Projector::new(c.len).reconstruct(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinskerParams {
    pub mu: f64,
    pub alpha: f64,
}

impl PinskerParams {
    pub fn new(mu: f64, alpha: f64) -> Result<Self> {
        let p = Self { mu, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) || !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "Pinsker parameters need mu > 0 and alpha > 0, got mu={}, alpha={}",
                self.mu, self.alpha
            )));
        }
        Ok(())
    }

    /// Ellipsoid semi-axis weight `a_l` for a 0-based coefficient index.
    pub fn axis_weight(&self, index: usize) -> f64 {
        match band_of(index) {
            0 => 0.0,
            k => (2.0 * k as f64).powf(self.alpha),
        }
    }

    /// Shrinkage factor `c_l = (1 − a_l/μ)₊`.
    pub fn shrinkage(&self, index: usize) -> f64 {
        (1.0 - self.axis_weight(index) / self.mu).max(0.0)
    }
}

/// Pinsker linear shrinkage; the output keeps only the prefix with positive
/// weights.
pub fn pinsker_estimate(c: &SequenceCoefficients, p: &PinskerParams) -> Result<SequenceCoefficients> {
    p.validate()?;
    let mut coeffs: Vec<f64> = c
        .coeffs
        .iter()
        .enumerate()
        .map(|(i, x)| p.shrinkage(i) * x)
        .collect();
    let support = (0..coeffs.len())
        .rev()
        .find(|&i| p.shrinkage(i) > 0.0)
        .map_or(0, |i| i + 1);
    coeffs.truncate(support);
    Ok(SequenceCoefficients {
        coeffs,
        len: c.len,
        sample_rate_hz: c.sample_rate_hz,
    })
}

/// Keeps DC plus the first `bands − 1` cos/sin pairs (`2·bands − 1` values).
pub fn truncate(c: &SequenceCoefficients, bands: usize) -> Result<SequenceCoefficients> {
    if bands == 0 || bands > max_bands(c.len) {
        return Err(Error::InvalidInput(format!(
            "retained bands {bands} outside [1, {}] for length {}",
            max_bands(c.len),
            c.len
        )));
    }
    let keep = 2 * bands - 1;
    let coeffs = (0..keep).map(|i| c.get(i)).collect();
    Ok(SequenceCoefficients {
        coeffs,
        len: c.len,
        sample_rate_hz: c.sample_rate_hz,
    })
}

/// Feature estimator applied per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Truncation { bands: usize },
    Pinsker { mu: f64, alpha: f64, bands: usize },
}

impl Default for Estimator {
    fn default() -> Self {
        Estimator::Truncation { bands: 2 }
    }
}

impl Estimator {
    pub fn bands(&self) -> usize {
        match *self {
            Estimator::Truncation { bands } | Estimator::Pinsker { bands, .. } => bands,
        }
    }

    pub fn with_bands(&self, bands: usize) -> Self {
        match *self {
            Estimator::Truncation { .. } => Estimator::Truncation { bands },
            Estimator::Pinsker { mu, alpha, .. } => Estimator::Pinsker { mu, alpha, bands },
        }
    }

    pub fn features_per_channel(&self) -> usize {
        2 * self.bands() - 1
    }

    fn apply(&self, c: &SequenceCoefficients) -> Result<SequenceCoefficients> {
        match *self {
            Estimator::Truncation { bands } => truncate(c, bands),
            Estimator::Pinsker { mu, alpha, bands } => {
                let shrunk = pinsker_estimate(c, &PinskerParams::new(mu, alpha)?)?;
                // validates the band count against the signal length
                truncate(&shrunk, bands)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: DVector<f64>,
    pub label: usize,
}

/// Channel blocks `[DC, cos₁, sin₁, …]` concatenated in channel order.
pub fn extract_features(trial: &Trial, estimator: &Estimator) -> Result<FeatureVector> {
    extract_with(&Projector::new(trial.len()), trial, estimator, None)
}

fn extract_with(
    projector: &Projector,
    trial: &Trial,
    estimator: &Estimator,
    t_used: Option<usize>,
) -> Result<FeatureVector> {
    let t = t_used.unwrap_or(trial.len());
    if t > trial.len() {
        return Err(Error::InvalidInput(format!(
            "requested {t} samples from a trial of length {}",
            trial.len()
        )));
    }
    let per_channel = estimator.features_per_channel();
    let mut values = Vec::with_capacity(trial.channels() * per_channel);
    for ch in 0..trial.channels() {
        let signal = &trial.channel(ch)[..t];
        let c = projector.project(signal, trial.sample_rate_hz)?;
        let est = estimator.apply(&c)?;
        values.extend((0..per_channel).map(|i| est.get(i)));
    }
    Ok(FeatureVector {
        values: DVector::from_vec(values),
        label: trial.target,
    })
}

/// Labeled feature vectors sharing one dimension and band count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub vectors: Vec<FeatureVector>,
    pub num_targets: usize,
    pub dim: usize,
    pub bands: usize,
}

impl FeatureDataset {
    pub fn new(vectors: Vec<FeatureVector>, num_targets: usize, bands: usize) -> Result<Self> {
        let dim = vectors.first().map_or(0, |v| v.values.len());
        for v in &vectors {
            if v.values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.values.len(),
                });
            }
            if v.label >= num_targets {
                return Err(Error::InvalidInput(format!(
                    "label {} outside [0, {num_targets})",
                    v.label
                )));
            }
        }
        Ok(Self {
            vectors,
            num_targets,
            dim,
            bands,
        })
    }

    /// Builds a dataset from raw `(values, label)` pairs.
    pub fn from_rows(rows: Vec<(Vec<f64>, usize)>, num_targets: usize, bands: usize) -> Result<Self> {
        let vectors = rows
            .into_iter()
            .map(|(v, label)| FeatureVector {
                values: DVector::from_vec(v),
                label,
            })
            .collect();
        Self::new(vectors, num_targets, bands)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_targets];
        for v in &self.vectors {
            counts[v.label] += 1;
        }
        counts
    }

    pub fn class_indices(&self, target: usize) -> Vec<usize> {
        self.vectors
            .iter()
            .enumerate()
            .filter(|(_, v)| v.label == target)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_vectors(&self, target: usize) -> impl Iterator<Item = &DVector<f64>> {
        self.vectors
            .iter()
            .filter(move |v| v.label == target)
            .map(|v| &v.values)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            vectors: indices.iter().map(|&i| self.vectors[i].clone()).collect(),
            num_targets: self.num_targets,
            dim: self.dim,
            bands: self.bands,
        }
    }

    /// Same dataset with every feature vector multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.vectors {
            v.values *= s;
        }
        out
    }
}

/// Extracts features from every trial (in parallel, order preserved).
pub fn extract_dataset(
    trials: &[Trial],
    estimator: &Estimator,
    t_used: Option<usize>,
    num_targets: usize,
) -> Result<FeatureDataset> {
    let len = match trials.first() {
        Some(t) => t_used.unwrap_or(t.len()),
        None => return FeatureDataset::new(Vec::new(), num_targets, estimator.bands()),
    };
    let projector = Projector::new(len);
    let vectors = trials
        .par_iter()
        .map(|t| extract_with(&projector, t, estimator, t_used))
        .collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(vectors, num_targets, estimator.bands())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::substream(seed, "test", "noise", 0);
        (0..len).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Direct O(T²) evaluation of the basis, independent of the FFT path.
    fn basis(len: usize, index: usize, t: usize) -> f64 {
        let tf = len as f64;
        if index == 0 {
            return 1.0 / tf.sqrt();
        }
        if len % 2 == 0 && index == len - 1 {
            return if t % 2 == 0 { 1.0 } else { -1.0 } / tf.sqrt();
        }
        let k = band_of(index) as f64;
        let arg = 2.0 * PI * k * t as f64 / tf;
        let s = (2.0 / tf).sqrt();
        if index % 2 == 1 {
            s * arg.cos()
        } else {
            s * arg.sin()
        }
    }

    #[test]
    fn fft_projection_matches_direct_basis_sums() {
        for len in [7usize, 8, 33, 50] {
            let f = noise(len, len as u64);
            let c = project(&f, 1000.0).unwrap();
            assert_eq!(c.coeffs.len(), len);
            for i in 0..len {
                let direct: f64 = (0..len).map(|t| f[t] * basis(len, i, t)).sum();
                assert!((direct - c.coeffs[i]).abs() < 1e-10, "len {len} index {i}");
            }
        }
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let c = project(&[3.0; 8], 1000.0).unwrap();
        assert_relative_eq!(c.coeffs[0], 3.0 * 8f64.sqrt(), epsilon = 1e-12);
        assert!(c.coeffs[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn pure_tone_lands_in_its_pair() {
        let len = 64;
        let f: Vec<f64> = (0..len)
            .map(|t| (2.0 * PI * t as f64 * 3.0 / len as f64).cos())
            .collect();
        let c = project(&f, 1000.0).unwrap();
        // 1-based x₆, x₇ are 0-based indices 5 and 6
        assert!(c.coeffs[5].abs() > 1.0);
        for (i, x) in c.coeffs.iter().enumerate() {
            if i != 5 && i != 6 {
                assert!(x.abs() < 1e-10, "index {i}: {x}");
            }
        }
    }

    #[test]
    fn parseval_on_random_signal() {
        let f = noise(100, 1);
        let c = project(&f, 1000.0).unwrap();
        let time: f64 = f.iter().map(|v| v * v).sum();
        assert!((c.energy() - time).abs() <= 1e-9 * time);
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(project(&[1.0, f64::NAN, 2.0], 1000.0).is_err());
        assert!(project(&[], 1000.0).is_err());
    }

    #[test]
    fn pinsker_limits_and_hand_weights() {
        let c = project(&noise(32, 2), 1000.0).unwrap();
        let wide = pinsker_estimate(&c, &PinskerParams::new(1e12, 1.0).unwrap()).unwrap();
        assert_eq!(wide.coeffs.len(), c.coeffs.len());
        for (a, b) in wide.coeffs.iter().zip(&c.coeffs) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }

        let p = PinskerParams::new(4.0, 1.0).unwrap();
        let w: Vec<f64> = (0..7).map(|i| p.shrinkage(i)).collect();
        assert_eq!(w, vec![1.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let est = pinsker_estimate(&c, &p).unwrap();
        assert_eq!(est.coeffs, vec![c.coeffs[0], 0.5 * c.coeffs[1], 0.5 * c.coeffs[2]]);

        let dc_only = pinsker_estimate(&c, &PinskerParams::new(3.0, 2.0).unwrap()).unwrap();
        assert_eq!(dc_only.coeffs, vec![c.coeffs[0]]);

        assert!(PinskerParams::new(0.0, 1.0).is_err());
        assert!(PinskerParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn sharp_pinsker_equals_truncation() {
        let c = project(&noise(64, 3), 1000.0).unwrap();
        let alpha = 64.0;
        for bands in 1..=6usize {
            // μ just below a for band L, so band L is zeroed and the weight
            // left off band L−1 is (lo/μ) ≈ ((L−1)/L)^α
            let lo = if bands == 1 { 0.0 } else { (2.0 * (bands - 1) as f64).powf(alpha) };
            let hi = (2.0 * bands as f64).powf(alpha);
            let mu = hi * (1.0 - 1e-9);
            let gap = lo / mu;
            assert!(gap < 1e-4);
            let p = pinsker_estimate(&c, &PinskerParams::new(mu, alpha).unwrap()).unwrap();
            let t = truncate(&c, bands).unwrap();
            assert_eq!(p.coeffs.len(), t.coeffs.len(), "bands {bands}");
            for (a, b) in p.coeffs.iter().zip(&t.coeffs) {
                assert!((a - b).abs() <= gap * b.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn truncation_range_and_dc() {
        let f = noise(10, 4);
        let c = project(&f, 1000.0).unwrap();
        assert!(truncate(&c, 0).is_err());
        assert!(truncate(&c, 6).is_err());
        assert_eq!(truncate(&c, 5).unwrap().coeffs.len(), 9);
        let dc = reconstruct(&truncate(&c, 1).unwrap()).unwrap();
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        assert!(dc.iter().all(|v| (v - mean).abs() < 1e-12));
    }

    #[test]
    fn cutoff_formula() {
        assert_relative_eq!(cutoff_hz(5, 950, 1000.0), 4000.0 / 950.0);
        assert_relative_eq!(cutoff_hz(1, 650, 1000.0), 0.0);
        assert_eq!(bands_for_cutoff(2.0, 650, 1000.0), 2);
        assert_eq!(bands_for_cutoff(15.0, 650, 1000.0), 11);
    }

    #[test]
    fn band_limited_signal_survives_truncation() {
        let len = 120;
        let mut c = SequenceCoefficients::zeros(len, 1000.0);
        for i in 0..5 {
            c.coeffs[i] = (i as f64 + 1.0) * 0.7 - 1.0;
        }
        let f = reconstruct(&c).unwrap();
        let again = reconstruct(&truncate(&project(&f, 1000.0).unwrap(), 3).unwrap()).unwrap();
        for (a, b) in f.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruct_zero_and_round_trip() {
        let z = reconstruct(&SequenceCoefficients::zeros(16, 1000.0)).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let f = noise(256, 5);
        let back = reconstruct(&project(&f, 1000.0).unwrap()).unwrap();
        let inf = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in f.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9 * inf);
        }
    }

    #[test]
    fn feature_dimensions() {
        let mk = |channels: usize| {
            Trial::new("s", 0, 0, channels, noise(channels * 650, 6), 1000.0).unwrap()
        };
        let t32 = mk(32);
        let two = extract_features(&t32, &Estimator::Truncation { bands: 2 }).unwrap();
        assert_eq!(two.values.len(), 96);
        let seven = extract_features(&t32, &Estimator::Truncation { bands: 7 }).unwrap();
        assert_eq!(seven.values.len(), 416);

        let t1 = mk(1);
        let one = extract_features(&t1, &Estimator::Truncation { bands: 1 }).unwrap();
        assert_eq!(one.values.len(), 1);
        let dc = project(t1.channel(0), 1000.0).unwrap().coeffs[0];
        assert_eq!(one.values[0], dc);

        // block layout: channel 1 starts at 2L−1
        let c1 = project(t32.channel(1), 1000.0).unwrap();
        assert_eq!(two.values[3], c1.coeffs[0]);
        assert_eq!(two.values[4], c1.coeffs[1]);
        assert_eq!(two.values[5], c1.coeffs[2]);
    }

    #[test]
    fn truncation_mse_shrinks_with_length() {
        // smooth band-limited waveform on [0, 1), sampled at T points
        let f = |u: f64| 1.0 + 0.8 * (2.0 * PI * u).cos() - 0.5 * (2.0 * PI * u).sin();
        let sigma = 1.0;
        let mut means = Vec::new();
        for (ti, &len) in [250usize, 1000, 4000].iter().enumerate() {
            let proj = Projector::new(len);
            let clean: Vec<f64> = (0..len).map(|t| f(t as f64 / len as f64)).collect();
            let mut rng = crate::rng::substream(9, "test", "mse", ti as u64);
            let errs: Vec<f64> = (0..200)
                .map(|_| {
                    let noisy: Vec<f64> = clean
                        .iter()
                        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let c = truncate(&proj.project(&noisy, 1000.0).unwrap(), 2).unwrap();
                    let est = proj.reconstruct(&c).unwrap();
                    est.iter().zip(&clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / len as f64
                })
                .collect();
            let m = errs.iter().sum::<f64>() / 200.0;
            let sd = (errs.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 199.0).sqrt();
            means.push((m, sd / 200f64.sqrt()));
        }
        for w in means.windows(2) {
            assert!(w[1].0 <= w[0].0 + w[0].1, "{means:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projection_is_linear(len in 2usize..80, a in -5.0f64..5.0, b in -5.0f64..5.0, seed in any::<u64>()) {
            let f = noise(len, seed);
            let g = noise(len, seed.wrapping_add(1));
            let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
            let pm = project(&mix, 1.0).unwrap();
            let pf = project(&f, 1.0).unwrap();
            let pg = project(&g, 1.0).unwrap();
            let scale = pm.energy().sqrt().max(1.0);
            for i in 0..len {
                prop_assert!((pm.coeffs[i] - (a * pf.coeffs[i] + b * pg.coeffs[i])).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn round_trip_is_identity(len in 1usize..300, seed in any::<u64>()) {
            let f = noise(len, seed);
            let back = reconstruct(&project(&f, 1.0).unwrap()).unwrap();
            let inf = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            for (x, y) in f.iter().zip(&back) {
                prop_assert!((x - y).abs() <= 1e-9 * inf);
            }
        }
    }
}
