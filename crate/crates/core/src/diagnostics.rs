//! Checks on the signal model: the residual left after removing the smooth
//! part should be white Gaussian noise.

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::Trial;
use crate::error::{Error, Result};
use crate::features::{bands_for_cutoff, cutoff_hz, max_bands, truncate, Projector};

/// Default KS significance level.
pub const DEFAULT_SIGNIFICANCE: f64 = 0.01;

/// `signal − reconstruct(truncate(project(signal), bands))`.
pub fn extract_noise(signal: &[f64], sample_rate_hz: f64, bands: usize) -> Result<Vec<f64>> {
    residual_with(&Projector::new(signal.len()), signal, sample_rate_hz, bands)
}

fn residual_with(projector: &Projector, signal: &[f64], sample_rate_hz: f64, bands: usize) -> Result<Vec<f64>> {
    let c = projector.project(signal, sample_rate_hz)?;
    let smooth = projector.reconstruct(&truncate(&c, bands)?)?;
    Ok(signal.iter().zip(smooth).map(|(f, s)| f - s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    /// The standard-normal null was not rejected.
    pub confirmed: bool,
    pub statistic: f64,
    pub p_value: f64,
}

/// `P(K > λ)` for the Kolmogorov distribution, 20-term series.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=20 {
        let j = j as f64;
        let sign = if j as u32 % 2 == 1 { 1.0 } else { -1.0 };
        sum += sign * (-2.0 * j * j * lambda * lambda).exp();
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// One-sample KS test against `N(0, 1)` after dividing by the sample
/// standard deviation (the residual is not re-centered).
pub fn ks_gof(residual: &[f64], significance: f64) -> Result<KsResult> {
    let n = residual.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!("KS test needs at least 10 samples, got {n}")));
    }
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::Config(format!("significance must lie in (0, 1), got {significance}")));
    }
    let nf = n as f64;
    let mean = residual.iter().sum::<f64>() / nf;
    let var = residual.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::InvalidInput("residual has zero or non-finite variance".into()));
    }
    let mut z: Vec<f64> = residual.iter().map(|x| x / sd).collect();
    z.sort_by(f64::total_cmp);
    let mut d = 0.0f64;
    for (i, &x) in z.iter().enumerate() {
        let f = std_normal_cdf(x);
        d = d.max((i + 1) as f64 / nf - f).max(f - i as f64 / nf);
    }
    let p_value = kolmogorov_sf(nf.sqrt() * d);
    Ok(KsResult {
        confirmed: p_value >= significance,
        statistic: d,
        p_value,
    })
}

/// Average of `r rᵀ` over residuals, normalized to unit diagonal.
pub fn correlation_of(residuals: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let t = residuals.first().map_or(0, Vec::len);
    if t == 0 {
        return Err(Error::InvalidInput("no residuals".into()));
    }
    let mut m = DMatrix::zeros(t, residuals.len());
    for (j, r) in residuals.iter().enumerate() {
        if r.len() != t {
            return Err(Error::DimensionMismatch { expected: t, got: r.len() });
        }
        m.column_mut(j).copy_from_slice(r);
    }
    let avg = &m * m.transpose() / residuals.len() as f64;
    let d: Vec<f64> = (0..t).map(|i| avg[(i, i)].sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("residual sample with zero variance".into()));
    }
    let mut c = DMatrix::from_fn(t, t, |i, j| avg[(i, j)] / (d[i] * d[j]));
    c.fill_diagonal(1.0);
    Ok(c)
}

/// Noise correlation matrix of one channel, averaged over trials.
pub fn noise_correlation(trials: &[Trial], channel: usize, bands: usize, t_used: Option<usize>) -> Result<DMatrix<f64>> {
    if trials.len() < 2 {
        return Err(Error::InvalidInput("noise correlation needs at least 2 trials".into()));
    }
    let t = t_used.unwrap_or(trials[0].len());
    for tr in trials {
        if tr.len() < t || (t_used.is_none() && tr.len() != t) {
            return Err(Error::DimensionMismatch { expected: t, got: tr.len() });
        }
        if channel >= tr.channels() {
            return Err(Error::InvalidInput(format!("channel {channel} out of range")));
        }
    }
    let projector = Projector::new(t);
    let residuals = trials
        .par_iter()
        .map(|tr| residual_with(&projector, &tr.channel(channel)[..t], tr.sample_rate_hz, bands))
        .collect::<Result<Vec<_>>>()?;
    correlation_of(&residuals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchParams {
    pub window: String,
    pub segment_len: usize,
    pub overlap_fraction: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub freqs_hz: Vec<f64>,
    pub power: Vec<f64>,
    pub params: WelchParams,
}

impl PsdEstimate {
    /// Rectangle-rule integral of the one-sided density.
    pub fn integral(&self) -> f64 {
        let df = self.freqs_hz.get(1).copied().unwrap_or(0.0);
        self.power.iter().sum::<f64>() * df
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq_hz,power\n");
        for (f, p) in self.freqs_hz.iter().zip(&self.power) {
            out.push_str(&format!("{f},{p:e}\n"));
        }
        out
    }
}

/// Welch estimate with a periodic Hann window, one-sided, scaled so white
/// noise of variance `v` integrates to `v`. Trailing samples that do not fill
/// a segment are dropped.
pub fn welch_psd(signal: &[f64], sample_rate_hz: f64, segment_len: usize, overlap_fraction: f64) -> Result<PsdEstimate> {
    if segment_len < 2 || segment_len > signal.len() {
        return Err(Error::InvalidInput(format!(
            "segment length {segment_len} outside [2, {}]",
            signal.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap_fraction}")));
    }
    if !(sample_rate_hz > 0.0) {
        return Err(Error::InvalidInput("sample rate must be positive".into()));
    }
    let m = segment_len;
    let step = ((m as f64 * (1.0 - overlap_fraction)).round() as usize).max(1);
    let window: Vec<f64> = (0..m)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / m as f64).cos())
        .collect();
    let w_power: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(m);
    let bins = m / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut segments = 0;
    let mut start = 0;
    while start + m <= signal.len() {
        let mut buf: Vec<Complex<f64>> = signal[start..start + m]
            .iter()
            .zip(&window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p += buf[k].norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (sample_rate_hz * w_power * segments as f64);
    for (k, p) in power.iter_mut().enumerate() {
        let one_sided = if k == 0 || (m % 2 == 0 && k == m / 2) { 1.0 } else { 2.0 };
        *p *= scale * one_sided;
    }
    Ok(PsdEstimate {
        freqs_hz: (0..bins).map(|k| k as f64 * sample_rate_hz / m as f64).collect(),
        power,
        params: WelchParams {
            window: "hann".into(),
            segment_len,
            overlap_fraction,
            segments,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub cutoffs_hz: Vec<f64>,
    pub bands: Vec<usize>,
    /// Share of residual sequences (trials × channels) not rejected by KS,
    /// one entry per cut-off.
    pub confirm_proportion: Vec<f64>,
    pub significance: f64,
    /// Channel-0 noise correlation at the first cut-off, row-major.
    pub correlation_matrix: Vec<f64>,
    pub len: usize,
}

impl NoiseReport {
    pub fn correlation(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len, self.len, &self.correlation_matrix)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cutoff_hz,bands,confirm_proportion\n");
        for ((c, b), p) in self.cutoffs_hz.iter().zip(&self.bands).zip(&self.confirm_proportion) {
            out.push_str(&format!("{c},{b},{p:.6}\n"));
        }
        out
    }
}

/// KS confirm proportions over a set of cut-off frequencies.
pub fn noise_report(trials: &[Trial], cutoffs_hz: &[f64], significance: f64, t_used: Option<usize>) -> Result<NoiseReport> {
    let first = trials
        .first()
        .ok_or_else(|| Error::InvalidInput("noise report needs trials".into()))?;
    if cutoffs_hz.is_empty() {
        return Err(Error::Config("no cut-off frequencies".into()));
    }
    let t = t_used.unwrap_or(first.len());
    let fs = first.sample_rate_hz;
    let bands: Vec<usize> = cutoffs_hz.iter().map(|&c| bands_for_cutoff(c, t, fs)).collect();
    if let Some(&b) = bands.iter().find(|&&b| b > max_bands(t)) {
        return Err(Error::Config(format!(
            "cut-off maps to {b} bands, above the maximum {} for T = {t}",
            max_bands(t)
        )));
    }
    let projector = Projector::new(t);
    let confirm_proportion = bands
        .iter()
        .map(|&l| {
            let outcomes = trials
                .par_iter()
                .map(|tr| {
                    if tr.len() < t {
                        return Err(Error::DimensionMismatch { expected: t, got: tr.len() });
                    }
                    (0..tr.channels())
                        .map(|ch| {
                            let r = residual_with(&projector, &tr.channel(ch)[..t], tr.sample_rate_hz, l)?;
                            Ok(usize::from(ks_gof(&r, significance)?.confirmed))
                        })
                        .sum::<Result<usize>>()
                        .map(|c| (c, tr.channels()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (ok, total) = outcomes.iter().fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
            Ok(ok as f64 / total as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let correlation = if trials.len() >= 2 {
        noise_correlation(trials, 0, bands[0], Some(t))?
    } else {
        DMatrix::identity(t, t)
    };
    Ok(NoiseReport {
        cutoffs_hz: cutoffs_hz.to_vec(),
        bands: bands.clone(),
        confirm_proportion,
        significance,
        correlation_matrix: correlation.transpose().as_slice().to_vec(),
        len: t,
    })
}

/// Cut-off frequency represented by each band count, for reporting.
pub fn cutoffs_for_bands(bands: &[usize], len: usize, sample_rate_hz: f64) -> Vec<f64> {
    bands.iter().map(|&b| cutoff_hz(b, len, sample_rate_hz)).collect()
}
