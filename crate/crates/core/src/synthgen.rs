//! Deterministic synthetic scene corpus: band-limited noise, tones and
//! amplitude modulation per class, with optional near-silent outliers.

use crate::audio_io::{encode_wav_channels, segment_id, BitDepth};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Scene names, in the order classes are allocated.
pub const SCENE_NAMES: [&str; 15] = [
    "beach",
    "bus",
    "cafe/restaurant",
    "car",
    "city_center",
    "forest_path",
    "grocery_store",
    "home",
    "library",
    "metro_station",
    "office",
    "park",
    "residential_area",
    "train",
    "tram",
];

pub const FOLDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub band_centers_hz: Vec<f64>,
    pub band_widths_hz: Vec<f64>,
    pub am_rate_hz: f64,
    pub tones_hz: Vec<f64>,
    pub level_dbfs: f64,
}

/// Each class owns two noise bands and one tone on an interleaved
/// log-frequency grid, plus its own modulation rate.
pub fn scene_specs(num_classes: usize, sample_rate_hz: u32) -> Vec<SceneSpec> {
    let top = (0.32 * sample_rate_hz as f64).min(14_000.0);
    let (lo, slots) = (150.0f64, 3 * num_classes);
    let grid: Vec<f64> = (0..slots)
        .map(|i| lo * (top / lo).powf(i as f64 / (slots - 1).max(1) as f64))
        .collect();
    (0..num_classes)
        .map(|c| {
            let centers = vec![grid[c], grid[c + 2 * num_classes]];
            SceneSpec {
                name: SCENE_NAMES
                    .get(c)
                    .map_or_else(|| format!("scene{c}"), |s| s.to_string()),
                band_widths_hz: centers.iter().map(|f| 0.15 * f).collect(),
                band_centers_hz: centers,
                am_rate_hz: 0.5 + 1.25 * c as f64,
                tones_hz: vec![grid[c + num_classes]],
                level_dbfs: -14.0,
            }
        })
        .collect()
}

fn db_to_amp(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

fn gaussian_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// White noise shaped by Gaussian bumps in the spectrum, scaled to unit RMS.
fn band_noise(n: usize, sr: f64, centers: &[f64], widths: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = gaussian_noise(n, rng).into_iter().map(|v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        let gain: f64 = centers
            .iter()
            .zip(widths)
            .map(|(&c, &w)| (-0.5 * ((f - c) / w).powi(2)).exp())
            .sum();
        *v *= gain;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let r = rms(&out).max(1e-300);
    out.into_iter().map(|v| v / r).collect()
}

/// One clean segment of `spec` with per-segment jitter drawn from `rng`.
pub fn synthesize_scene(spec: &SceneSpec, sample_rate_hz: u32, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = sample_rate_hz as f64;
    let jitter = |rng: &mut ChaCha8Rng, f: f64, rel: f64| f * (1.0 + rng.random_range(-rel..rel));
    let centers: Vec<f64> = spec.band_centers_hz.iter().map(|&f| jitter(rng, f, 0.06)).collect();
    let level = db_to_amp(spec.level_dbfs + rng.random_range(-4.0..4.0));
    let am_rate = jitter(rng, spec.am_rate_hz, 0.1);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let mut x = band_noise(n, sr, &centers, &spec.band_widths_hz, rng);
    for (t, v) in x.iter_mut().enumerate() {
        let am = 1.0 + 0.6 * (2.0 * PI * am_rate * t as f64 / sr + am_phase).sin();
        *v *= level * am;
    }
    for &tone in &spec.tones_hz {
        let f = jitter(rng, tone, 0.02);
        let (a, ph) = (0.5 * level, rng.random_range(0.0..2.0 * PI));
        for (t, v) in x.iter_mut().enumerate() {
            *v += a * (2.0 * PI * f * t as f64 / sr + ph).sin();
        }
    }
    let floor = db_to_amp(-50.0);
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += floor * z;
    }
    x.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
}

/// Near-constant signal: a tiny DC offset plus 1e-4 white noise.
pub fn synthesize_outlier(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dc = rng.random_range(-1e-4..1e-4);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (dc + 1e-4 * z) as f32
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub segments_per_class: usize,
    pub seed: u64,
    pub outlier_frac: f64,
    pub outlier_mislabel: bool,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 5,
            segments_per_class: 40,
            seed: 42,
            outlier_frac: 0.0,
            outlier_mislabel: false,
            sample_rate_hz: 44_100,
            duration_s: 10.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_classes > SCENE_NAMES.len() * 4 {
            return bad(format!("at most {} classes", SCENE_NAMES.len() * 4));
        }
        if self.segments_per_class < 2 * FOLDS {
            return bad(format!(
                "need at least {} segments per class, got {}",
                2 * FOLDS,
                self.segments_per_class
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_frac) {
            return bad(format!("outlier fraction {} outside [0, 1]", self.outlier_frac));
        }
        if self.sample_rate_hz < 8000 || !(self.duration_s > 0.0) {
            return bad("sample rate must be >= 8000 Hz and duration positive".into());
        }
        Ok(())
    }
}

/// One generated file and its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSegment {
    pub relative_path: String,
    pub fold: usize,
    pub true_label: usize,
    /// Label written to the metadata (differs from `true_label` for mislabeled outliers).
    pub label: usize,
    pub is_outlier: bool,
}

impl SynthSegment {
    pub fn segment_id(&self) -> String {
        segment_id(&self.relative_path, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub classes: Vec<String>,
    pub segments: Vec<SynthSegment>,
}

impl SynthDataset {
    pub fn outlier_ids(&self) -> Vec<String> {
        self.segments.iter().filter(|s| s.is_outlier).map(SynthSegment::segment_id).collect()
    }
}

/// Membership, fold and outlier assignment, without audio.
pub fn plan_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let specs = scene_specs(cfg.num_classes, cfg.sample_rate_hz);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut segments = Vec::new();
    for class in 0..cfg.num_classes {
        let mut folds: Vec<usize> = (0..cfg.segments_per_class).map(|i| i % FOLDS).collect();
        folds.shuffle(&mut rng);
        for fold in folds {
            let idx = segments.len();
            segments.push(SynthSegment {
                relative_path: format!("audio/seg{idx:04}.wav"),
                fold,
                true_label: class,
                label: class,
                is_outlier: false,
            });
        }
    }
    // Every segment trains in three of the four folds.
    let count = ((cfg.outlier_frac * segments.len() as f64) + 1e-9).floor() as usize;
    let mut by_fold: Vec<Vec<usize>> = vec![Vec::new(); FOLDS];
    for (i, s) in segments.iter().enumerate() {
        by_fold[s.fold].push(i);
    }
    by_fold.iter_mut().for_each(|f| f.shuffle(&mut rng));
    let mut cursor = [0usize; FOLDS];
    for i in 0..count {
        let mut fold = i % FOLDS;
        while cursor[fold] >= by_fold[fold].len() {
            fold = (fold + 1) % FOLDS;
        }
        let seg = &mut segments[by_fold[fold][cursor[fold]]];
        cursor[fold] += 1;
        seg.is_outlier = true;
        if cfg.outlier_mislabel {
            let shift = rng.random_range(1..cfg.num_classes);
            seg.label = (seg.true_label + shift) % cfg.num_classes;
        }
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        classes: specs.into_iter().map(|s| s.name).collect(),
        segments,
    })
}

/// Audio of one planned segment; each segment has its own RNG stream.
pub fn render_segment(ds: &SynthDataset, index: usize) -> Vec<f32> {
    let cfg = &ds.config;
    let n = (cfg.duration_s * cfg.sample_rate_hz as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let seg = &ds.segments[index];
    if seg.is_outlier {
        synthesize_outlier(n, &mut rng)
    } else {
        let specs = scene_specs(cfg.num_classes, cfg.sample_rate_hz);
        synthesize_scene(&specs[seg.true_label], cfg.sample_rate_hz, n, &mut rng)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| SynthError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const META_HEADER: &str = "relative_path\tscene_label";
pub const FOLD_HEADER: &str = "relative_path";

/// Writes `audio/*.wav`, `meta.tsv`, `classes.txt`, `folds/fold{k}_{train,test}.tsv`
/// and `outliers_truth.tsv` under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthDataset> {
    let ds = plan_dataset(cfg)?;
    for (i, seg) in ds.segments.iter().enumerate() {
        let audio = render_segment(&ds, i);
        write(
            &out_dir.join(&seg.relative_path),
            &encode_wav_channels(&[&audio], cfg.sample_rate_hz, BitDepth::Pcm16),
        )?;
    }
    let mut meta = format!("{META_HEADER}\n");
    let mut truth = String::from("segment_id\tis_outlier\ttrue_label\n");
    for seg in &ds.segments {
        writeln!(meta, "{}\t{}", seg.relative_path, ds.classes[seg.label]).unwrap();
        writeln!(truth, "{}\t{}\t{}", seg.segment_id(), seg.is_outlier, ds.classes[seg.true_label]).unwrap();
    }
    write(&out_dir.join("meta.tsv"), meta.as_bytes())?;
    write(&out_dir.join("outliers_truth.tsv"), truth.as_bytes())?;
    write(&out_dir.join("classes.txt"), (ds.classes.join("\n") + "\n").as_bytes())?;
    for fold in 0..FOLDS {
        for (kind, in_split) in [("train", false), ("test", true)] {
            let mut text = format!("{FOLD_HEADER}\n");
            for seg in ds.segments.iter().filter(|s| (s.fold == fold) == in_split) {
                writeln!(text, "{}", seg.relative_path).unwrap();
            }
            write(&out_dir.join(format!("folds/fold{}_{kind}.tsv", fold + 1)), text.as_bytes())?;
        }
    }
    Ok(ds)
}
