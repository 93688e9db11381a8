//! Trials, electrode-depth configurations (EDCs), nearest-EDC bundling and the
//! synthetic two-subject generator.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{band_of, max_bands, Projector, SequenceCoefficients};
use crate::moments::{sym_exp, Whitener};
use crate::rng::substream;

/// One multichannel trial; samples are stored row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub subject_id: String,
    pub edc_index: u32,
    pub target: usize,
    pub sample_rate_hz: f64,
    channels: usize,
    samples: Vec<f64>,
}

impl Trial {
    pub fn new(
        subject_id: impl Into<String>,
        edc_index: u32,
        target: usize,
        channels: usize,
        samples: Vec<f64>,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        if channels == 0 || samples.is_empty() || samples.len() % channels != 0 {
            return Err(Error::InvalidInput(format!(
                "{} samples cannot be split into {channels} equal non-empty channels",
                samples.len()
            )));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            edc_index,
            target,
            sample_rate_hz,
            channels,
            samples,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let t = self.len();
        &self.samples[ch * t..(ch + 1) * t]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edc {
    pub index: u32,
    pub depths_mm: Vec<f64>,
}

impl Edc {
    pub fn distance(&self, other: &Edc) -> f64 {
        self.depths_mm
            .iter()
            .zip(&other.depths_mm)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn mean_depth_mm(&self) -> f64 {
        self.depths_mm.iter().sum::<f64>() / self.depths_mm.len().max(1) as f64
    }
}

/// All trials of one subject, grouped by EDC.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialStore {
    pub subject_id: String,
    pub channels: usize,
    pub len: usize,
    pub sample_rate_hz: f64,
    pub num_targets: usize,
    pub edcs: BTreeMap<u32, Edc>,
    pub trials: Vec<Trial>,
}

impl TrialStore {
    pub fn new(
        subject_id: impl Into<String>,
        channels: usize,
        len: usize,
        sample_rate_hz: f64,
        num_targets: usize,
        edcs: Vec<Edc>,
        trials: Vec<Trial>,
    ) -> Result<Self> {
        let edcs: BTreeMap<u32, Edc> = edcs.into_iter().map(|e| (e.index, e)).collect();
        let store = Self {
            subject_id: subject_id.into(),
            channels,
            len,
            sample_rate_hz,
            num_targets,
            edcs,
            trials,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.len == 0 || self.num_targets == 0 {
            return Err(Error::InvalidInput(
                "store needs channels, length and targets >= 1".into(),
            ));
        }
        for e in self.edcs.values() {
            if e.depths_mm.len() != self.channels || e.depths_mm.iter().any(|d| !d.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "EDC {} depth vector must hold {} finite values",
                    e.index, self.channels
                )));
            }
        }
        for t in &self.trials {
            if t.channels() != self.channels || t.len() != self.len {
                return Err(Error::InvalidInput(format!(
                    "trial shape {}x{} differs from store shape {}x{}",
                    t.channels(),
                    t.len(),
                    self.channels,
                    self.len
                )));
            }
            if t.target >= self.num_targets {
                return Err(Error::InvalidInput(format!(
                    "trial target {} outside [0, {})",
                    t.target, self.num_targets
                )));
            }
            if !self.edcs.contains_key(&t.edc_index) {
                return Err(Error::InvalidInput(format!(
                    "trial references unknown EDC {}",
                    t.edc_index
                )));
            }
        }
        Ok(())
    }

    pub fn edc_trial_count(&self, edc: u32) -> usize {
        self.trials.iter().filter(|t| t.edc_index == edc).count()
    }

    pub fn target_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_targets];
        for t in &self.trials {
            c[t.target] += 1;
        }
        c
    }
}

/// EDC indices in bundling order: the concurrent EDC first, then the others
/// by increasing Euclidean depth distance (ties to the lower index), cut
/// after the cumulative trial count reaches `window`.
pub fn bundle_order(store: &TrialStore, concurrent: u32, window: usize) -> Result<Vec<u32>> {
    let centre = store
        .edcs
        .get(&concurrent)
        .ok_or_else(|| Error::InvalidInput(format!("concurrent EDC {concurrent} not in store")))?;
    let available = store.trials.len();
    if available < window {
        return Err(Error::WindowUnsatisfiable {
            needed: window,
            available,
        });
    }
    let mut others: Vec<(f64, u32)> = store
        .edcs
        .values()
        .filter(|e| e.index != concurrent)
        .map(|e| (centre.distance(e), e.index))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut order = vec![concurrent];
    let mut total = store.edc_trial_count(concurrent);
    for (_, idx) in others {
        if total >= window {
            break;
        }
        total += store.edc_trial_count(idx);
        order.push(idx);
    }
    Ok(order)
}

/// Nearest-EDC trial bundling around `concurrent` with clustering window `window`.
///
/// Whole EDCs are appended, so the result may exceed the window.
pub fn bundle(store: &TrialStore, concurrent: u32, window: usize) -> Result<TrialStore> {
    let order = bundle_order(store, concurrent, window)?;
    let mut trials = Vec::new();
    for idx in &order {
        trials.extend(store.trials.iter().filter(|t| t.edc_index == *idx).cloned());
    }
    Ok(TrialStore {
        subject_id: store.subject_id.clone(),
        channels: store.channels,
        len: store.len,
        sample_rate_hz: store.sample_rate_hz,
        num_targets: store.num_targets,
        edcs: order.iter().map(|i| (*i, store.edcs[i].clone())).collect(),
        trials,
    })
}

/// Ground-truth relation between the two synthetic subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubjectLink {
    /// `H₀ = I` for every target, `θ₀` constant.
    Identity {
        #[serde(default)]
        theta: f64,
    },
    /// `H₀ = exp(g·I + S₀ + S_k)` with gain `g = log_gain`, random symmetric
    /// `S₀` shared by all targets and `S_k` per target (entries of standard
    /// deviation `shared_log_scale / √n` and `log_scale / √n`); `θ₀` proportional to
    /// the diagonal of the destination covariance, scaled so that
    /// `‖W_Y diag(θ₀) W_Yᵀ‖_F` equals `noise_ratio`.
    RandomSpd {
        log_scale: f64,
        #[serde(default)]
        shared_log_scale: f64,
        #[serde(default)]
        log_gain: f64,
        #[serde(default)]
        noise_ratio: f64,
    },
    /// Explicit per-target row-major `H₀` and `θ₀`.
    Explicit { h: Vec<Vec<f64>>, theta: Vec<Vec<f64>> },
}

impl Default for SubjectLink {
    fn default() -> Self {
        SubjectLink::Identity { theta: 0.0 }
    }
}

fn default_subject_x() -> String {
    "X".into()
}
fn default_subject_y() -> String {
    "Y".into()
}

/// Generator configuration.
///
/// Features live in the orthonormal coefficient space of the first
/// `signal_bands` bands of every channel (dimension `channels·(2L−1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    #[serde(default = "default_subject_x")]
    pub subject_x: String,
    #[serde(default = "default_subject_y")]
    pub subject_y: String,
    pub channels: usize,
    #[serde(rename = "T")]
    pub len: usize,
    pub sample_rate_hz: f64,
    pub num_targets: usize,
    pub trials_per_target: usize,
    pub num_edcs: usize,
    pub edc_depth_step_mm: f64,
    pub sobolev_order: f64,
    pub signal_bands: usize,
    pub noise_sigma: f64,
    pub class_separation: f64,
    /// Isotropic within-class standard deviation of the latent coefficients.
    pub class_spread: f64,
    /// Amplitude of the target-independent mean waveform.
    pub common_amplitude: f64,
    pub subject_link: SubjectLink,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subject_x: default_subject_x(),
            subject_y: default_subject_y(),
            channels: 32,
            len: 650,
            sample_rate_hz: 1000.0,
            num_targets: 8,
            trials_per_target: 112,
            num_edcs: 1,
            edc_depth_step_mm: 0.25,
            sobolev_order: 1.0,
            signal_bands: 2,
            noise_sigma: 1.0,
            class_separation: 4.0,
            class_spread: 1.0,
            common_amplitude: 4.0,
            subject_link: SubjectLink::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn feature_dim(&self) -> usize {
        self.channels * (2 * self.signal_bands - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.len == 0 || self.num_targets == 0 {
            return bad("channels, T and num_targets must be >= 1".into());
        }
        if self.trials_per_target == 0 || self.num_edcs == 0 {
            return bad("trials_per_target and num_edcs must be >= 1".into());
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive".into());
        }
        if !(self.sobolev_order > 0.0) {
            return bad("sobolev_order must be positive".into());
        }
        if self.signal_bands == 0 || self.signal_bands > max_bands(self.len) {
            return bad(format!(
                "signal_bands must lie in [1, {}]",
                max_bands(self.len)
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.class_spread >= 0.0) {
            return bad("noise_sigma and class_spread must be >= 0".into());
        }
        if !(self.class_separation > 0.0) {
            return bad("class_separation must be positive".into());
        }
        if !self.common_amplitude.is_finite() || !self.edc_depth_step_mm.is_finite() {
            return bad("common_amplitude and edc_depth_step_mm must be finite".into());
        }
        Ok(())
    }

    /// Feature-level covariance of subject X (latent spread plus white noise).
    fn x_feature_cov(&self) -> DMatrix<f64> {
        let n = self.feature_dim();
        DMatrix::identity(n, n) * (self.class_spread.powi(2) + self.noise_sigma.powi(2))
    }

    /// `H₀ Σ_X H₀ᵀ + diag θ₀`.
    fn y_feature_cov(&self, h: &DMatrix<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut c = h * self.x_feature_cov() * h.transpose();
        for i in 0..theta.len() {
            c[(i, i)] += theta[i];
        }
        c
    }

    fn resolve_link(&self) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
        let n = self.feature_dim();
        let k = self.num_targets;
        match &self.subject_link {
            SubjectLink::Identity { theta } => {
                if !(*theta >= 0.0) {
                    return Err(Error::Config("theta0 entries must be >= 0".into()));
                }
                Ok((0..k)
                    .map(|_| (DMatrix::identity(n, n), DVector::from_element(n, *theta)))
                    .collect())
            }
            SubjectLink::RandomSpd {
                log_scale,
                shared_log_scale,
                log_gain,
                noise_ratio,
            } => {
                if !(*noise_ratio >= 0.0)
                    || !log_scale.is_finite()
                    || !shared_log_scale.is_finite()
                    || !log_gain.is_finite()
                {
                    return Err(Error::Config(
                        "random link needs finite log scales and noise_ratio >= 0".into(),
                    ));
                }
                let random_sym = |purpose: &str, index: u64, scale: f64| {
                    let mut rng = substream(self.seed, "dataset", purpose, index);
                    let sd = scale / (n as f64).sqrt();
                    let mut s = DMatrix::zeros(n, n);
                    for i in 0..n {
                        for j in i..n {
                            let v: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
                            s[(i, j)] = v;
                            s[(j, i)] = v;
                        }
                    }
                    s
                };
                let shared = random_sym("shared_link", 0, *shared_log_scale) + DMatrix::identity(n, n) * *log_gain;
                (0..k)
                    .map(|target| {
                        let h = sym_exp(&(&shared + random_sym("link", target as u64, *log_scale)));
                        let theta = self.theta_for_ratio(&h, *noise_ratio)?;
                        Ok((h, theta))
                    })
                    .collect()
            }
            SubjectLink::Explicit { h, theta } => {
                if h.len() != k || theta.len() != k {
                    return Err(Error::Config(format!(
                        "explicit link needs {k} matrices and {k} theta vectors"
                    )));
                }
                h.iter()
                    .zip(theta)
                    .map(|(hm, th)| {
                        if hm.len() != n * n || th.len() != n {
                            return Err(Error::Config(format!(
                                "explicit link entries must be {n}x{n} and length {n}"
                            )));
                        }
                        if th.iter().any(|v| !(*v >= 0.0)) {
                            return Err(Error::Config("theta0 entries must be >= 0".into()));
                        }
                        let hm = DMatrix::from_row_slice(n, n, hm);
                        let sv = hm.clone().singular_values();
                        let cond = sv.max() / sv.min();
                        if !(cond.is_finite() && cond < 1e12) {
                            return Err(Error::Config(format!(
                                "H0 is singular (condition number {cond:e})"
                            )));
                        }
                        Ok((hm, DVector::from_vec(th.clone())))
                    })
                    .collect()
            }
        }
    }

    /// θ₀ ∝ diag(Σ_Y) scaled so that the whitened noise has the requested
    /// Frobenius norm.
    fn theta_for_ratio(&self, h: &DMatrix<f64>, ratio: f64) -> Result<DVector<f64>> {
        let n = self.feature_dim();
        if ratio == 0.0 {
            return Ok(DVector::zeros(n));
        }
        let base = self.y_feature_cov(h, &DVector::zeros(n)).diagonal();
        let eval = |c: f64| -> Result<f64> {
            let theta = &base * c;
            let w = Whitener::from_covariance(&self.y_feature_cov(h, &theta))?;
            Ok(frobenius_ratio(&w.forward, &theta))
        };
        // ratio(c) increases monotonically toward √n as c → ∞
        if ratio >= (n as f64).sqrt() {
            return Err(Error::Config(format!(
                "noise_ratio {ratio} unreachable (must be below sqrt(n) = {})",
                (n as f64).sqrt()
            )));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while eval(hi)? < ratio {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if eval(mid)? < ratio {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(&base * (0.5 * (lo + hi)))
    }
}

/// `‖W diag(θ) Wᵀ‖_F`.
pub fn frobenius_ratio(w: &DMatrix<f64>, theta: &DVector<f64>) -> f64 {
    let mut scaled = w.clone();
    for (j, t) in theta.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*t);
    }
    (scaled * w.transpose()).norm()
}

/// Feature-level population moments of the synthetic pair for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub target: usize,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    /// Row-major `n×n`.
    pub x_cov: Vec<f64>,
    pub y_cov: Vec<f64>,
    pub h0: Vec<f64>,
    pub theta0: Vec<f64>,
    /// `‖W_Y diag(θ₀) W_Yᵀ‖_F` with `W_Y = Σ_Y^{-1/2}`.
    pub frobenius_ratio: f64,
}

impl TargetTruth {
    fn mat(&self, v: &[f64]) -> DMatrix<f64> {
        let n = self.x_mean.len();
        DMatrix::from_row_slice(n, n, v)
    }
    pub fn x_mean(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x_mean)
    }
    pub fn y_mean(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y_mean)
    }
    pub fn x_cov(&self) -> DMatrix<f64> {
        self.mat(&self.x_cov)
    }
    pub fn y_cov(&self) -> DMatrix<f64> {
        self.mat(&self.y_cov)
    }
    pub fn h0(&self) -> DMatrix<f64> {
        self.mat(&self.h0)
    }
}

/// Ground truth record written next to the generated trial files.
///
/// Moments refer to features extracted with truncation at `signal_bands`
/// bands over the full trial length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub feature_dim: usize,
    pub signal_bands: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub targets: Vec<TargetTruth>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Regular-simplex class centres embedded in `n` dimensions.
fn class_centres(spec: &SynthSpec) -> Vec<DVector<f64>> {
    let n = spec.feature_dim();
    let k = spec.num_targets;
    let mut rng = substream(spec.seed, "dataset", "geometry", 0);
    let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    // n×k embedding with orthonormal columns (or rows when n < k)
    let embed = if n >= k {
        gauss(n, k).qr().q()
    } else {
        gauss(k, n).qr().q().transpose()
    };
    let common = {
        let g = gauss(n, 1);
        let per_channel = 2 * spec.signal_bands - 1;
        DVector::from_fn(n, |i, _| {
            let band = band_of(i % per_channel) as f64;
            spec.common_amplitude * (1.0 + band).powf(-spec.sobolev_order) * g[(i, 0)]
        })
    };
    (0..k)
        .map(|target| {
            let vertex = if k == 1 {
                DVector::zeros(1)
            } else {
                let mut v = DVector::from_element(k, -1.0 / k as f64);
                v[target] += 1.0;
                let norm = v.norm();
                v / norm
            };
            let class_part = if k == 1 {
                DVector::zeros(n)
            } else {
                &embed * vertex * spec.class_separation
            };
            &common + class_part
        })
        .collect()
}

/// Generates subject X and subject Y stores plus the ground-truth record.
///
/// Per trial, latent coefficients `x ~ N(m_k, spread²·I)` are drawn for the
/// first `signal_bands` bands of every channel and the time-domain trial is
/// their reconstruction plus i.i.d. `N(0, σ²)` noise. Subject Y uses
/// independent draws whose in-band coefficients (latent plus noise) are
/// mapped through `y = H₀ x + z`, `z ~ N(0, diag θ₀)`; out-of-band noise is
/// left white.
pub fn generate_pair(spec: &SynthSpec) -> Result<(TrialStore, TrialStore, GroundTruth)> {
    spec.validate()?;
    let links = spec.resolve_link()?;
    let centres = class_centres(spec);
    let per_channel = 2 * spec.signal_bands - 1;

    let projector = Projector::new(spec.len);
    let basis: Vec<Vec<f64>> = (0..per_channel)
        .map(|i| {
            let mut c = SequenceCoefficients::zeros(spec.len, spec.sample_rate_hz);
            c.coeffs[i] = 1.0;
            projector.reconstruct(&c)
        })
        .collect::<Result<_>>()?;

    let edcs: Vec<Edc> = (0..spec.num_edcs as u32)
        .map(|index| Edc {
            index,
            depths_mm: (0..spec.channels)
                .map(|c| index as f64 * spec.edc_depth_step_mm + 0.01 * c as f64)
                .collect(),
        })
        .collect();

    // (edc, target, repetition) ordering
    let mut slots: Vec<(u32, usize, usize)> = Vec::new();
    for edc in 0..spec.num_edcs {
        for target in 0..spec.num_targets {
            for rep in (edc..spec.trials_per_target).step_by(spec.num_edcs) {
                slots.push((edc as u32, target, rep));
            }
        }
    }

    // Time-domain white noise is drawn first; its in-band part is folded into
    // the feature vector so that, at feature level, Y = H₀·X + Z holds with X
    // including its own noise.
    let synthesize = |latent: DVector<f64>,
                      link: Option<&(DMatrix<f64>, DVector<f64>)>,
                      rng: &mut rand_chacha::ChaCha8Rng|
     -> Vec<f64> {
        let noise: Vec<f64> = (0..spec.channels * spec.len)
            .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let in_band = DVector::from_fn(latent.len(), |i, _| {
            let (ch, j) = (i / per_channel, i % per_channel);
            let seg = &noise[ch * spec.len..(ch + 1) * spec.len];
            seg.iter().zip(&basis[j]).map(|(a, b)| a * b).sum::<f64>()
        });
        let band = match link {
            None => latent,
            Some((h, theta)) => {
                let mut y = h * (&latent + &in_band) - &in_band;
                for i in 0..y.len() {
                    y[i] += theta[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
                y
            }
        };
        let mut samples = noise;
        for ch in 0..spec.channels {
            let block = &band.as_slice()[ch * per_channel..(ch + 1) * per_channel];
            for (t, s) in samples[ch * spec.len..(ch + 1) * spec.len].iter_mut().enumerate() {
                *s += block.iter().zip(&basis).map(|(c, b)| c * b[t]).sum::<f64>();
            }
        }
        samples
    };

    let make_store = |subject: &str, purpose: &str, linked: bool| -> Result<TrialStore> {
        let trials = slots
            .par_iter()
            .map(|&(edc, target, rep)| {
                let index = (target * spec.trials_per_target + rep) as u64;
                let mut rng = substream(spec.seed, "dataset", purpose, index);
                let n = spec.feature_dim();
                let latent = DVector::from_fn(n, |i, _| {
                    let e: f64 = rng.sample(StandardNormal);
                    centres[target][i] + spec.class_spread * e
                });
                let samples = synthesize(latent, linked.then(|| &links[target]), &mut rng);
                Trial::new(subject, edc, target, spec.channels, samples, spec.sample_rate_hz)
            })
            .collect::<Result<Vec<_>>>()?;
        TrialStore::new(
            subject,
            spec.channels,
            spec.len,
            spec.sample_rate_hz,
            spec.num_targets,
            edcs.clone(),
            trials,
        )
    };

    let x = make_store(&spec.subject_x, "x_trial", false)?;
    let y = make_store(&spec.subject_y, "y_trial", true)?;

    let x_cov = spec.x_feature_cov();
    let targets = links
        .iter()
        .enumerate()
        .map(|(target, (h, theta))| {
            let y_cov = spec.y_feature_cov(h, theta);
            let w = Whitener::from_covariance(&y_cov)?;
            Ok(TargetTruth {
                target,
                x_mean: centres[target].as_slice().to_vec(),
                y_mean: (h * &centres[target]).as_slice().to_vec(),
                x_cov: row_major(&x_cov),
                y_cov: row_major(&y_cov),
                h0: row_major(h),
                theta0: theta.as_slice().to_vec(),
                frobenius_ratio: frobenius_ratio(&w.forward, theta),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        x,
        y,
        GroundTruth {
            feature_dim: spec.feature_dim(),
            signal_bands: spec.signal_bands,
            channels: spec.channels,
            noise_sigma: spec.noise_sigma,
            targets,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_dataset, Estimator};
    use crate::moments::estimate_moments;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            channels: 2,
            len: 64,
            num_targets: 3,
            trials_per_target: 20,
            num_edcs: 3,
            ..SynthSpec::default()
        }
    }

    fn store_with(edcs: &[(u32, Vec<f64>, usize)]) -> TrialStore {
        let channels = edcs[0].1.len();
        let mut trials = Vec::new();
        for (idx, _, count) in edcs {
            for r in 0..*count {
                trials.push(Trial::new("s", *idx, r % 2, channels, vec![r as f64; channels * 4], 1000.0).unwrap());
            }
        }
        TrialStore::new(
            "s",
            channels,
            4,
            1000.0,
            2,
            edcs.iter().map(|(i, d, _)| Edc { index: *i, depths_mm: d.clone() }).collect(),
            trials,
        )
        .unwrap()
    }

    #[test]
    fn window_already_full_returns_concurrent_only() {
        let s = store_with(&[(0, vec![0.0, 0.0], 10), (1, vec![1.0, 0.0], 10)]);
        let b = bundle(&s, 1, 10).unwrap();
        assert_eq!(b.trials.len(), 10);
        assert!(b.trials.iter().all(|t| t.edc_index == 1));
    }

    #[test]
    fn nearest_edc_is_appended() {
        let s = store_with(&[
            (1, vec![0.0, 0.0], 10),
            (2, vec![1.0, 0.0], 10),
            (3, vec![5.0, 0.0], 10),
        ]);
        let b = bundle(&s, 1, 15).unwrap();
        assert_eq!(b.trials.len(), 20);
        assert_eq!(b.edcs.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn distance_ties_go_to_lower_index() {
        let s = store_with(&[
            (0, vec![0.0], 5),
            (4, vec![-1.0], 5),
            (7, vec![1.0], 5),
        ]);
        assert_eq!(bundle_order(&s, 0, 8).unwrap(), vec![0, 4]);
    }

    #[test]
    fn unsatisfiable_window_errors() {
        let s = store_with(&[(0, vec![0.0], 5), (1, vec![1.0], 5)]);
        assert!(matches!(bundle(&s, 0, 11), Err(Error::WindowUnsatisfiable { needed: 11, available: 10 })));
        assert!(bundle(&s, 9, 1).is_err());
    }

    #[test]
    fn paper_scale_window_spans_many_edcs() {
        let layout: Vec<(u32, Vec<f64>, usize)> =
            (0..34u32).map(|i| (i, vec![i as f64 * 0.1; 3], 88 + (i as usize % 5))).collect();
        let s = store_with(&layout);
        let b = bundle(&s, 12, 900).unwrap();
        assert!(b.trials.len() >= 900);
        assert!(b.edcs.len() >= 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let (x1, y1, g1) = generate_pair(&spec).unwrap();
        let (x2, y2, g2) = generate_pair(&spec).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
        assert_eq!(x1.target_counts(), vec![20; 3]);
        assert_eq!(y1.target_counts(), vec![20; 3]);
        let other = generate_pair(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(other.0, x1);
    }

    #[test]
    fn identity_link_without_noise_matches_means() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let (_, _, gt) = generate_pair(&spec).unwrap();
        for t in &gt.targets {
            assert_eq!(t.x_mean, t.y_mean);
            assert_eq!(t.frobenius_ratio, 0.0);
        }
    }

    #[test]
    fn doubled_link_doubles_empirical_means() {
        let n = 3; // one channel, two bands
        let h: Vec<f64> = DMatrix::<f64>::identity(n, n).scale(2.0).as_slice().to_vec();
        let per_target = 10_000;
        let spec = SynthSpec {
            channels: 1,
            len: 32,
            num_targets: 2,
            trials_per_target: per_target,
            noise_sigma: 0.0,
            subject_link: SubjectLink::Explicit {
                h: vec![h.clone(), h],
                theta: vec![vec![0.0; n]; 2],
            },
            ..SynthSpec::default()
        };
        let (x, y, _) = generate_pair(&spec).unwrap();
        let est = Estimator::Truncation { bands: 2 };
        let fx = extract_dataset(&x.trials, &est, None, 2).unwrap();
        let fy = extract_dataset(&y.trials, &est, None, 2).unwrap();
        for k in 0..2 {
            let mx = estimate_moments(&fx, k).unwrap().mean;
            let my = estimate_moments(&fy, k).unwrap().mean;
            let rel = (&my - &mx * 2.0).norm() / (&mx * 2.0).norm();
            assert!(rel < 3.0 / (per_target as f64).sqrt(), "target {k}: {rel}");
        }
    }

    #[test]
    fn empirical_moments_converge_to_ground_truth() {
        let spec = SynthSpec {
            channels: 1,
            len: 40,
            num_targets: 2,
            trials_per_target: 10_000,
            noise_sigma: 0.5,
            subject_link: SubjectLink::RandomSpd {
                log_scale: 0.5,
                shared_log_scale: 0.3,
                log_gain: 0.2,
                noise_ratio: 0.1,
            },
            ..SynthSpec::default()
        };
        let (x, y, gt) = generate_pair(&spec).unwrap();
        let est = Estimator::Truncation { bands: 2 };
        let fx = extract_dataset(&x.trials, &est, None, 2).unwrap();
        let fy = extract_dataset(&y.trials, &est, None, 2).unwrap();
        for t in &gt.targets {
            let mx = estimate_moments(&fx, t.target).unwrap();
            let my = estimate_moments(&fy, t.target).unwrap();
            let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm();
            assert!(rel(mx.covariance().unwrap(), &t.x_cov()) < 0.05);
            assert!(rel(my.covariance().unwrap(), &t.y_cov()) < 0.05);
            assert!((&mx.mean - t.x_mean()).norm() / t.x_mean().norm() < 0.05);
            assert!((&my.mean - t.y_mean()).norm() / t.y_mean().norm() < 0.05);
            assert!((t.frobenius_ratio - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_links() {
        let singular = SynthSpec {
            channels: 1,
            signal_bands: 1,
            num_targets: 1,
            subject_link: SubjectLink::Explicit {
                h: vec![vec![0.0]],
                theta: vec![vec![0.0]],
            },
            ..SynthSpec::default()
        };
        assert!(generate_pair(&singular).is_err());
        let negative = SynthSpec {
            subject_link: SubjectLink::Explicit {
                h: vec![vec![1.0]],
                theta: vec![vec![-0.1]],
            },
            ..singular.clone()
        };
        assert!(generate_pair(&negative).is_err());
        let neg_id = SynthSpec {
            subject_link: SubjectLink::Identity { theta: -1.0 },
            ..singular
        };
        assert!(generate_pair(&neg_id).is_err());
    }

    #[test]
    fn edc_layout_is_grouped_and_ordered() {
        let (x, _, _) = generate_pair(&small_spec()).unwrap();
        assert_eq!(x.edcs.len(), 3);
        let idx: Vec<u32> = x.trials.iter().map(|t| t.edc_index).collect();
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(x.trials.len(), 60);
    }
}
