//! Spectral front end: Hamming-windowed STFT, peak-normalised mel filterbank,
//! log-mel images for the networks and MFCC(+delta, +acceleration) frames
//! for the GMM baseline.

use crate::audio_io::AudioClip;
use ndarray::{s, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("clip of {samples} samples is shorter than one {frame_len}-sample frame")]
    ClipTooShort { samples: usize, frame_len: usize },
    #[error("invalid framing: {0}")]
    InvalidFraming(String),
    #[error("invalid filterbank range: {0}")]
    InvalidRange(String),
    #[error("mel filter {0} covers no FFT bin; use fewer bands or a longer FFT")]
    EmptyFilter(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("MFCC needs {expected} mel bands, got {got}")]
    WrongBandCount { expected: usize, got: usize },
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

/// Magnitude STFT, `[n_frames x n_bins]`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub magnitudes: Array2<f64>,
    pub frame_len: usize,
    pub hop_len: usize,
    pub n_fft: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.magnitudes.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.magnitudes.ncols()
    }
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Frame and hop lengths in samples for a frame duration and overlap fraction.
pub fn framing(sample_rate_hz: u32, frame_ms: f64, overlap: f64) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(DspError::InvalidFraming(format!("overlap {overlap} outside [0, 1)")));
    }
    let frame_len = (frame_ms / 1000.0 * sample_rate_hz as f64).round();
    if !(frame_len >= 1.0) {
        return Err(DspError::InvalidFraming(format!("{frame_ms} ms is shorter than one sample")));
    }
    let frame_len = frame_len as usize;
    let hop = ((frame_len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    Ok((frame_len, hop))
}

/// Number of full frames: `1 + floor((len - frame_len) / hop)`, or 0 if the
/// signal is shorter than one frame.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len {
        0
    } else {
        1 + (len - frame_len) / hop
    }
}

/// Hamming-windowed magnitude STFT with the frame zero-padded to the next
/// power of two.
pub fn stft_magnitude(clip: &AudioClip, frame_ms: f64, overlap: f64) -> Result<Spectrogram> {
    let (frame_len, hop_len) = framing(clip.sample_rate_hz, frame_ms, overlap)?;
    let n_frames = frame_count(clip.samples.len(), frame_len, hop_len);
    if n_frames == 0 {
        return Err(DspError::ClipTooShort {
            samples: clip.samples.len(),
            frame_len,
        });
    }
    let n_fft = frame_len.next_power_of_two();
    let n_bins = n_fft / 2 + 1;
    let window = hamming(frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::default(); n_fft];
    let mut magnitudes = Array2::zeros((n_frames, n_bins));
    for (f, mut row) in magnitudes.axis_iter_mut(Axis(0)).enumerate() {
        let frame = &clip.samples[f * hop_len..f * hop_len + frame_len];
        for (slot, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(x as f64 * w, 0.0);
        }
        buf[frame_len..].fill(Complex::default());
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (m, c) in row.iter_mut().zip(&buf[..n_bins]) {
            *m = c.norm();
        }
    }
    Ok(Spectrogram {
        magnitudes,
        frame_len,
        hop_len,
        n_fft,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `[n_mels x n_bins]`, each rescaled to peak at 1.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Array2<f64>,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub n_mels: usize,
    /// `n_mels + 2` band edges in Hz; filter `r` spans `edges[r]..edges[r+2]`.
    pub edges_hz: Vec<f64>,
}

pub fn mel_filterbank(sample_rate_hz: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<MelFilterbank> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(DspError::InvalidRange(format!(
            "need 0 <= fmin < fmax <= {nyquist}, got {fmin}..{fmax}"
        )));
    }
    if n_mels < 2 {
        return Err(DspError::InvalidRange(format!("n_mels must be >= 2, got {n_mels}")));
    }
    if n_fft < 2 {
        return Err(DspError::InvalidRange(format!("n_fft must be >= 2, got {n_fft}")));
    }
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / n_fft as f64;
    let mut weights = Array2::zeros((n_mels, n_bins));
    for (r, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        let (l, c, u) = (edges_hz[r], edges_hz[r + 1], edges_hz[r + 2]);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = ((f - l) / (c - l)).min((u - f) / (u - c)).max(0.0);
        }
        let peak = row.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(DspError::EmptyFilter(r));
        }
        row.mapv_inplace(|w| w / peak);
    }
    Ok(MelFilterbank {
        weights,
        fmin_hz: fmin,
        fmax_hz: fmax,
        n_mels,
        edges_hz,
    })
}

/// `ln(W · |X|² + eps)`, shaped `[n_mels x n_frames]`.
pub fn log_mel(spec: &Spectrogram, fb: &MelFilterbank, floor_eps: f64) -> Result<Array2<f64>> {
    if fb.weights.ncols() != spec.n_bins() {
        return Err(DspError::DimensionMismatch(format!(
            "filterbank has {} bins, spectrogram {}",
            fb.weights.ncols(),
            spec.n_bins()
        )));
    }
    let power = spec.magnitudes.mapv(|m| m * m);
    let energy = fb.weights.dot(&power.t());
    Ok(energy.mapv(|e| (e + floor_eps).ln()))
}

pub const MFCC_BANDS: usize = 40;
pub const MFCC_COEFFS: usize = 20;
pub const MFCC_DIM: usize = 3 * MFCC_COEFFS;

/// Orthonormal DCT-II of each frame of a `[40 x T]` log-mel matrix, keeping
/// coefficients 0..20; returns `[T x 20]`.
pub fn mfcc_frames(logmel40: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let bands = logmel40.nrows();
    if bands != MFCC_BANDS {
        return Err(DspError::WrongBandCount {
            expected: MFCC_BANDS,
            got: bands,
        });
    }
    Ok(logmel40.t().dot(&dct2_basis(bands, MFCC_COEFFS).t()))
}

/// `[keep x n]` orthonormal DCT-II matrix.
pub fn dct2_basis(n: usize, keep: usize) -> Array2<f64> {
    Array2::from_shape_fn((keep, n), |(k, m)| {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        scale * (PI * k as f64 * (m as f64 + 0.5) / n as f64).cos()
    })
}

fn regression_delta(x: ArrayView2<'_, f64>, half: usize) -> Array2<f64> {
    let t_len = x.nrows();
    let denom = 2.0 * (1..=half).map(|n| (n * n) as f64).sum::<f64>();
    let last = t_len as isize - 1;
    let at = |t: isize| t.clamp(0, last) as usize;
    Array2::from_shape_fn(x.dim(), |(t, c)| {
        let t = t as isize;
        (1..=half)
            .map(|n| n as f64 * (x[[at(t + n as isize), c]] - x[[at(t - n as isize), c]]))
            .sum::<f64>()
            / denom
    })
}

/// `[static | delta | acceleration]` with regression deltas over
/// `window_frames` (odd, >= 3) and replicated edge frames.
pub fn delta_features(coeffs: ArrayView2<'_, f64>, window_frames: usize) -> Result<Array2<f64>> {
    if window_frames < 3 || window_frames.is_multiple_of(2) {
        return Err(DspError::InvalidFraming(format!(
            "delta window must be odd and >= 3, got {window_frames}"
        )));
    }
    let (t, c) = coeffs.dim();
    let mut out = Array2::zeros((t, 3 * c));
    if t == 0 {
        return Ok(out);
    }
    let half = (window_frames - 1) / 2;
    let delta = regression_delta(coeffs, half);
    let accel = regression_delta(delta.view(), half);
    out.slice_mut(s![.., 0..c]).assign(&coeffs);
    out.slice_mut(s![.., c..2 * c]).assign(&delta);
    out.slice_mut(s![.., 2 * c..]).assign(&accel);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::LogMel => "logmel",
            FeatureKind::Mfcc => "mfcc",
        })
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logmel" => Ok(FeatureKind::LogMel),
            "mfcc" => Ok(FeatureKind::Mfcc),
            other => Err(format!("unknown feature kind `{other}`")),
        }
    }
}

/// Labeled feature matrix of one segment (or one patch of it).
///
/// Log-mel records are `[n_mels x n_frames]`; MFCC records are `[n_frames x 60]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub segment_id: String,
    pub label: Option<usize>,
    pub kind: FeatureKind,
    pub data: Array2<f64>,
    pub sample_variance: Option<f64>,
    pub patch_index: Option<usize>,
}

impl FeatureRecord {
    pub fn new(segment_id: impl Into<String>, label: Option<usize>, kind: FeatureKind, data: Array2<f64>) -> Self {
        FeatureRecord {
            segment_id: segment_id.into(),
            label,
            kind,
            data,
            sample_variance: None,
            patch_index: None,
        }
    }
}

/// Non-overlapping `[rows x patch_frames]` crops along time; the remainder
/// is dropped. Patches inherit the segment's id and label.
pub fn patchify(record: &FeatureRecord, patch_frames: usize) -> Result<Vec<FeatureRecord>> {
    let frames = record.data.ncols();
    if patch_frames == 0 || frames < patch_frames {
        return Err(DspError::TooFewFrames {
            needed: patch_frames.max(1),
            got: frames,
        });
    }
    Ok((0..frames / patch_frames)
        .map(|p| FeatureRecord {
            segment_id: record.segment_id.clone(),
            label: record.label,
            kind: record.kind,
            data: record
                .data
                .slice(s![.., p * patch_frames..(p + 1) * patch_frames])
                .to_owned(),
            sample_variance: record.sample_variance,
            patch_index: Some(p),
        })
        .collect())
}

/// Framing and band layout shared by both feature paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub overlap: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// `None` means Nyquist.
    pub fmax_hz: Option<f64>,
    pub floor_eps: f64,
    pub delta_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_ms: 40.0,
            overlap: 0.5,
            n_mels: 128,
            fmin_hz: 0.0,
            fmax_hz: None,
            floor_eps: 1e-10,
            delta_window: 9,
        }
    }
}

impl FeatureConfig {
    fn filterbank(&self, clip: &AudioClip, n_fft: usize, n_mels: usize) -> Result<MelFilterbank> {
        let fmax = self.fmax_hz.unwrap_or(clip.sample_rate_hz as f64 / 2.0);
        mel_filterbank(clip.sample_rate_hz, n_fft, n_mels, self.fmin_hz, fmax)
    }

    /// Network input: `[n_mels x T]` log-mel image.
    pub fn logmel(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        let spec = stft_magnitude(clip, self.frame_ms, self.overlap)?;
        let fb = self.filterbank(clip, spec.n_fft, self.n_mels)?;
        log_mel(&spec, &fb, self.floor_eps)
    }

    /// Baseline input: `[T x 60]` MFCC + delta + acceleration frames from 40 bands.
    pub fn mfcc60(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        let spec = stft_magnitude(clip, self.frame_ms, self.overlap)?;
        let fb = self.filterbank(clip, spec.n_fft, MFCC_BANDS)?;
        let lm = log_mel(&spec, &fb, self.floor_eps)?;
        delta_features(mfcc_frames(lm.view())?.view(), self.delta_window)
    }
}
