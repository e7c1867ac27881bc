//! Cross-validation protocol: metadata and folds, training-split curation,
//! per-fold training and scoring, results and reports.

use crate::audio_io::{parent_of_segment, read_wav, segment_clip, AudioError};
use crate::curation::{cull_by_level, cull_low_variance, rms_dbfs, sample_variance, CurationConfig, CurationError, CurationMethod, CurationReport};
use crate::dsp::{patchify, DspError, FeatureConfig, FeatureKind, FeatureRecord};
use crate::gmm::{em_fit, EmOptions, GmmBank, GmmError};
use crate::models::{build_densenet, predict_segment, train, Aggregation, DenseNetConfig, Model, ModelError, Patch, TrainLog, TrainOptions};
use crate::store::{FeatureStore, StoreError};
use crate::synthgen::SCENE_NAMES;
use log::info;
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub type DynError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: unknown label `{label}`")]
    UnknownLabel { file: PathBuf, line: usize, label: String },
    #[error("{0} appears in more than one test fold")]
    OverlappingFolds(String),
    #[error("fold {fold}: {path} is in both train and test")]
    TrainTestOverlap { fold: usize, path: String },
    #[error("{0} is not in any test fold")]
    MissingFromFolds(String),
    #[error("{file}: {path} is not listed in the metadata")]
    UnknownSegment { file: PathBuf, path: String },
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("no {kind} features for {clip}")]
    NoFeatures { kind: FeatureKind, clip: String },
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: DynError },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| match source.kind() {
        io::ErrorKind::NotFound => HarnessError::MissingFile(path.to_path_buf()),
        _ => HarnessError::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty data lines with 1-based line numbers, skipping a header equal to `header`.
fn data_lines<'a>(text: &'a str, header: &'a str) -> impl Iterator<Item = (usize, &'a str)> + 'a {
    text.lines()
        .enumerate()
        .filter(move |(i, l)| !l.trim().is_empty() && !(*i == 0 && l.trim() == header))
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub relative_path: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    /// 1-based.
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub clips: Vec<ClipMeta>,
    pub folds: Vec<FoldSplit>,
    /// Clips of the optional held-out evaluation split.
    pub evaluation: Option<Vec<String>>,
}

impl Dataset {
    pub fn label_map(&self) -> HashMap<&str, usize> {
        self.clips.iter().map(|c| (c.relative_path.as_str(), c.label)).collect()
    }
}

/// Class list: `classes.txt` beside the metadata, else the 15 stock scene names.
pub fn load_classes(meta_path: &Path) -> Result<Vec<String>> {
    let path = meta_path.with_file_name("classes.txt");
    if !path.exists() {
        return Ok(SCENE_NAMES.iter().map(|s| s.to_string()).collect());
    }
    Ok(read_text(&path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn read_path_list(path: &Path, known: &HashSet<&str>) -> Result<Vec<String>> {
    let text = read_text(path)?;
    data_lines(&text, "relative_path")
        .map(|(_, l)| {
            let p = l.split('\t').next().unwrap_or("").trim().to_string();
            if known.contains(p.as_str()) {
                Ok(p)
            } else {
                Err(HarnessError::UnknownSegment {
                    file: path.to_path_buf(),
                    path: p,
                })
            }
        })
        .collect()
}

/// Reads `meta.tsv` (relative_path, scene_label) and `fold{1..4}_{train,test}.tsv`,
/// plus `evaluate.tsv` when present, and validates the partition.
pub fn load_metadata(meta_path: &Path, folds_dir: &Path) -> Result<Dataset> {
    let classes = load_classes(meta_path)?;
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let text = read_text(meta_path)?;
    let mut clips = Vec::new();
    let mut seen = HashSet::new();
    for (line, l) in data_lines(&text, crate::synthgen::META_HEADER) {
        let mut cols = l.split('\t');
        let (Some(path), Some(label)) = (cols.next(), cols.next()) else {
            return Err(HarnessError::Parse {
                file: meta_path.to_path_buf(),
                line,
                msg: "expected relative_path<TAB>scene_label".into(),
            });
        };
        let label = label.trim();
        let Some(&label_idx) = index.get(label) else {
            return Err(HarnessError::UnknownLabel {
                file: meta_path.to_path_buf(),
                line,
                label: label.to_string(),
            });
        };
        if !seen.insert(path.to_string()) {
            return Err(HarnessError::Parse {
                file: meta_path.to_path_buf(),
                line,
                msg: format!("{path} listed twice"),
            });
        }
        clips.push(ClipMeta {
            relative_path: path.to_string(),
            label: label_idx,
        });
    }
    let known: HashSet<&str> = clips.iter().map(|c| c.relative_path.as_str()).collect();
    let eval_path = folds_dir.join("evaluate.tsv");
    let evaluation = if eval_path.exists() {
        Some(read_path_list(&eval_path, &known)?)
    } else {
        None
    };
    let eval_set: HashSet<&str> = evaluation.iter().flatten().map(String::as_str).collect();

    let mut folds = Vec::new();
    let mut tested: HashSet<String> = HashSet::new();
    for k in 1..=4 {
        let train = read_path_list(&folds_dir.join(format!("fold{k}_train.tsv")), &known)?;
        let test = read_path_list(&folds_dir.join(format!("fold{k}_test.tsv")), &known)?;
        let test_set: HashSet<&str> = test.iter().map(String::as_str).collect();
        for p in &test {
            if !tested.insert(p.clone()) {
                return Err(HarnessError::OverlappingFolds(p.clone()));
            }
        }
        if let Some(p) = train.iter().find(|p| test_set.contains(p.as_str())) {
            return Err(HarnessError::TrainTestOverlap { fold: k, path: p.clone() });
        }
        folds.push(FoldSplit { index: k, train, test });
    }
    if let Some(c) = clips
        .iter()
        .find(|c| !tested.contains(&c.relative_path) && !eval_set.contains(c.relative_path.as_str()))
    {
        return Err(HarnessError::MissingFromFolds(c.relative_path.clone()));
    }
    Ok(Dataset {
        classes,
        clips,
        folds,
        evaluation,
    })
}

/// Features of one segment held in memory for an experiment.
#[derive(Clone, Debug)]
pub struct Segment {
    pub id: String,
    pub clip: String,
    pub label: usize,
    pub logmel: Option<Array2<f64>>,
    pub mfcc: Option<Array2<f64>>,
    pub variance: Option<f64>,
    pub level_dbfs: Option<f64>,
}

/// Loads the requested feature kinds for every segment of every metadata clip.
/// Labels come from the metadata.
pub fn load_segments(ds: &Dataset, store: &FeatureStore, kinds: &[FeatureKind]) -> Result<Vec<Segment>> {
    let labels = ds.label_map();
    let mut by_id: BTreeMap<String, Segment> = BTreeMap::new();
    for &kind in kinds {
        let mut found: HashSet<&str> = HashSet::new();
        for entry in store.entries_of(kind) {
            let clip = parent_of_segment(&entry.segment_id);
            let Some(&label) = labels.get(clip) else { continue };
            found.insert(clip);
            let rec = store.load(entry)?;
            let seg = by_id.entry(entry.segment_id.clone()).or_insert_with(|| Segment {
                id: entry.segment_id.clone(),
                clip: clip.to_string(),
                label,
                logmel: None,
                mfcc: None,
                variance: None,
                level_dbfs: None,
            });
            match kind {
                FeatureKind::LogMel => {
                    seg.variance = Some(match rec.sample_variance {
                        Some(v) => v,
                        None => sample_variance(&rec.data)?,
                    });
                    seg.logmel = Some(rec.data);
                }
                FeatureKind::Mfcc => seg.mfcc = Some(rec.data),
            }
        }
        if let Some(c) = ds.clips.iter().find(|c| !found.contains(c.relative_path.as_str())) {
            return Err(HarnessError::NoFeatures {
                kind,
                clip: c.relative_path.clone(),
            });
        }
    }
    // Natural order of clips in the metadata, then segment index.
    let order: HashMap<&str, usize> = ds
        .clips
        .iter()
        .enumerate()
        .map(|(i, c)| (c.relative_path.as_str(), i))
        .collect();
    let mut segs: Vec<Segment> = by_id.into_values().collect();
    segs.sort_by_key(|s| (order[s.clip.as_str()], segment_index(&s.id)));
    Ok(segs)
}

fn segment_index(id: &str) -> usize {
    id.rsplit_once('#').and_then(|(_, i)| i.parse().ok()).unwrap_or(0)
}

/// Fills `level_dbfs` by decoding each clip under `audio_root`.
pub fn attach_levels(segments: &mut [Segment], audio_root: &Path, segment_s: f64) -> Result<()> {
    let mut cache: HashMap<String, HashMap<String, f64>> = HashMap::new();
    for seg in segments.iter_mut() {
        if !cache.contains_key(&seg.clip) {
            let clip = read_wav(&audio_root.join(&seg.clip), &seg.clip)?;
            let levels = segment_clip(&clip, segment_s)?
                .into_iter()
                .map(|s| (s.source_id.clone(), rms_dbfs(&s.samples)))
                .collect();
            cache.insert(seg.clip.clone(), levels);
        }
        seg.level_dbfs = cache[&seg.clip].get(&seg.id).copied();
    }
    Ok(())
}

/// Extracts `kind` features for every segment of every metadata clip into `store`.
/// Log-mel records carry their sample variance. Returns the number of records written.
pub fn featurize(
    ds: &Dataset,
    audio_root: &Path,
    store: &mut FeatureStore,
    kind: FeatureKind,
    features: &FeatureConfig,
    segment_s: f64,
) -> Result<usize> {
    let records = ds
        .clips
        .par_iter()
        .map(|c| -> Result<Vec<FeatureRecord>> {
            let clip = read_wav(&audio_root.join(&c.relative_path), &c.relative_path)?;
            segment_clip(&clip, segment_s)?
                .iter()
                .map(|seg| {
                    let data = match kind {
                        FeatureKind::LogMel => features.logmel(seg)?,
                        FeatureKind::Mfcc => features.mfcc60(seg)?,
                    };
                    let mut rec = FeatureRecord::new(seg.source_id.clone(), Some(c.label), kind, data);
                    if kind == FeatureKind::LogMel {
                        rec.sample_variance = Some(sample_variance(&rec.data)?);
                    }
                    Ok(rec)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut n = 0;
    for rec in records.iter().flatten() {
        store.put(rec)?;
        n += 1;
    }
    store.save()?;
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gmm,
    DenseNet,
    MsDenseNet,
}

impl ModelKind {
    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Gmm => "Baseline (GMM)",
            ModelKind::DenseNet => "DenseNet",
            ModelKind::MsDenseNet => "Multi-scale DenseNet",
        }
    }

    pub fn needs(self) -> FeatureKind {
        match self {
            ModelKind::Gmm => FeatureKind::Mfcc,
            _ => FeatureKind::LogMel,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gmm => "gmm",
            ModelKind::DenseNet => "densenet",
            ModelKind::MsDenseNet => "msdensenet",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gmm" => Ok(ModelKind::Gmm),
            "densenet" => Ok(ModelKind::DenseNet),
            "msdensenet" => Ok(ModelKind::MsDenseNet),
            other => Err(format!("unknown model `{other}` (gmm, densenet, msdensenet)")),
        }
    }
}

/// Everything that determines an experiment; echoed into its result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    /// `default` or `tiny`; ignored by the GMM.
    pub preset: String,
    pub curation: CurationConfig,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub train: TrainOptions,
    pub val_fraction: f64,
    pub gmm: EmOptions,
    pub evaluate: bool,
}

impl ExperimentConfig {
    pub fn new(model: ModelKind) -> Self {
        ExperimentConfig {
            model,
            preset: "default".into(),
            curation: CurationConfig::variance(0.0),
            seed: 42,
            aggregation: Aggregation::MeanLogprob,
            train: TrainOptions::default(),
            val_fraction: 0.1,
            gmm: EmOptions::default(),
            evaluate: false,
        }
    }

    pub fn curated(&self) -> bool {
        match self.curation.method {
            CurationMethod::Variance => self.curation.ratio > 0.0,
            CurationMethod::Silence => true,
        }
    }

    pub fn network_config(&self, num_classes: usize) -> Result<DenseNetConfig> {
        let name = match (self.model, self.preset.as_str()) {
            (ModelKind::DenseNet, p) => p.to_string(),
            (ModelKind::MsDenseNet, p) => format!("{p}-multiscale"),
            (ModelKind::Gmm, _) => return Err(HarnessError::Invalid("the GMM has no network config".into())),
        };
        DenseNetConfig::preset(&name, num_classes).map_err(|e| HarnessError::Invalid(e.to_string()))
    }
}

pub trait SegmentClassifier {
    fn classify(&self, segment: &Segment) -> std::result::Result<usize, DynError>;
}

pub trait Trainer {
    /// Fits on `train` for fold `fold` (0 for the evaluation run).
    fn fit(&self, train: &[&Segment], num_classes: usize, fold: usize) -> std::result::Result<Box<dyn SegmentClassifier>, DynError>;
}

pub struct GmmTrainer {
    pub options: EmOptions,
    pub seed: u64,
    pub class_names: Vec<String>,
}

pub struct GmmClassifier(pub GmmBank);

impl SegmentClassifier for GmmClassifier {
    fn classify(&self, segment: &Segment) -> std::result::Result<usize, DynError> {
        let frames = segment.mfcc.as_ref().ok_or("segment has no MFCC features")?;
        Ok(self.0.classify_segment(frames.view())?.class)
    }
}

impl GmmTrainer {
    pub fn fit_bank(&self, train: &[&Segment], num_classes: usize, fold: usize) -> std::result::Result<GmmBank, DynError> {
        let mixtures = (0..num_classes)
            .into_par_iter()
            .map(|c| {
                let views: Vec<_> = train
                    .iter()
                    .filter(|s| s.label == c)
                    .filter_map(|s| s.mfcc.as_ref().map(|m| m.view()))
                    .collect();
                if views.is_empty() {
                    return Err(GmmError::TooFewFrames { frames: 0, k: self.options.components });
                }
                let frames = concatenate(Axis(0), &views).expect("all MFCC records have 60 columns");
                let opts = EmOptions {
                    seed: derive_seed(self.seed, fold, c),
                    ..self.options.clone()
                };
                Ok(em_fit(frames.view(), &opts)?.mixture)
            })
            .collect::<std::result::Result<Vec<_>, GmmError>>()?;
        Ok(GmmBank {
            class_names: (0..num_classes)
                .map(|c| self.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")))
                .collect(),
            mixtures,
        })
    }
}

impl Trainer for GmmTrainer {
    fn fit(&self, train: &[&Segment], num_classes: usize, fold: usize) -> std::result::Result<Box<dyn SegmentClassifier>, DynError> {
        Ok(Box::new(GmmClassifier(self.fit_bank(train, num_classes, fold)?)))
    }
}

pub fn derive_seed(base: u64, fold: usize, part: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((fold as u64) << 20).wrapping_add(part as u64)
}

pub struct NetTrainer {
    pub config: DenseNetConfig,
    pub options: TrainOptions,
    pub val_fraction: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
}

pub struct NetClassifier {
    pub model: Model,
    pub aggregation: Aggregation,
    pub patch_frames: usize,
}

pub fn segment_patches(logmel: &Array2<f64>, patch_frames: usize) -> std::result::Result<Vec<Vec<f32>>, DspError> {
    let rec = FeatureRecord::new("", None, FeatureKind::LogMel, logmel.clone());
    Ok(patchify(&rec, patch_frames)?
        .into_iter()
        .map(|p| p.data.iter().map(|&v| v as f32).collect())
        .collect())
}

impl SegmentClassifier for NetClassifier {
    fn classify(&self, segment: &Segment) -> std::result::Result<usize, DynError> {
        let logmel = segment.logmel.as_ref().ok_or("segment has no log-mel features")?;
        let patches = segment_patches(logmel, self.patch_frames)?;
        let refs: Vec<&[f32]> = patches.iter().map(Vec::as_slice).collect();
        Ok(predict_segment(&self.model, &refs, self.aggregation)?.0)
    }
}

impl NetTrainer {
    /// Stratified validation hold-out at segment level, then patch training.
    pub fn fit_model(&self, train_segs: &[&Segment], fold: usize) -> std::result::Result<(Model, TrainLog), DynError> {
        let num_classes = self.config.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, fold, 1000));
        let mut val_ids = HashSet::new();
        for c in 0..num_classes {
            let mut ids: Vec<&str> = train_segs.iter().filter(|s| s.label == c).map(|s| s.id.as_str()).collect();
            ids.shuffle(&mut rng);
            let n_val = (self.val_fraction * ids.len() as f64).floor() as usize;
            val_ids.extend(ids.into_iter().take(n_val));
        }
        let patch_frames = self.config.input_size.1;
        let (mut train_p, mut val_p) = (Vec::new(), Vec::new());
        for s in train_segs {
            let logmel = s.logmel.as_ref().ok_or("segment has no log-mel features")?;
            if logmel.nrows() != self.config.input_size.0 {
                return Err(format!("{} has {} mel bands, model expects {}", s.id, logmel.nrows(), self.config.input_size.0).into());
            }
            let target = if val_ids.contains(s.id.as_str()) { &mut val_p } else { &mut train_p };
            target.extend(segment_patches(logmel, patch_frames)?.into_iter().map(|pixels| Patch { pixels, label: s.label }));
        }
        let mut model = build_densenet(&self.config, derive_seed(self.seed, fold, 0))?;
        let opts = TrainOptions {
            seed: derive_seed(self.seed, fold, 1),
            ..self.options.clone()
        };
        info!("fold {fold}: {} training patches, {} validation patches", train_p.len(), val_p.len());
        let log = train(&mut model, &train_p, &val_p, &opts).map_err(|e: ModelError| Box::new(e) as DynError)?;
        Ok((model, log))
    }
}

impl Trainer for NetTrainer {
    fn fit(&self, train: &[&Segment], _num_classes: usize, fold: usize) -> std::result::Result<Box<dyn SegmentClassifier>, DynError> {
        let (model, _) = self.fit_model(train, fold)?;
        Ok(Box::new(NetClassifier {
            model,
            aggregation: self.aggregation,
            patch_frames: self.config.input_size.1,
        }))
    }
}

pub fn make_trainer(cfg: &ExperimentConfig, classes: &[String]) -> Result<Box<dyn Trainer>> {
    Ok(match cfg.model {
        ModelKind::Gmm => Box::new(GmmTrainer {
            options: cfg.gmm.clone(),
            seed: cfg.seed,
            class_names: classes.to_vec(),
        }),
        _ => Box::new(NetTrainer {
            config: cfg.network_config(classes.len())?,
            options: cfg.train.clone(),
            val_fraction: cfg.val_fraction,
            aggregation: cfg.aggregation,
            seed: cfg.seed,
        }),
    })
}

/// Curation report over `segments`: variance needs log-mel variances, silence
/// needs signal levels.
pub fn curation_report(segments: &[&Segment], curation: &CurationConfig) -> Result<CurationReport> {
    Ok(match curation.method {
        CurationMethod::Variance => {
            let stats = segments
                .iter()
                .map(|s| {
                    s.variance
                        .map(|v| (s.id.clone(), v))
                        .ok_or_else(|| CurationError::MissingVariance(s.id.clone()))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            cull_low_variance(&stats, curation.ratio)?
        }
        CurationMethod::Silence => {
            let levels = segments
                .iter()
                .map(|s| {
                    s.level_dbfs
                        .map(|v| (s.id.clone(), v))
                        .ok_or_else(|| HarnessError::Invalid(format!("no signal level for {}", s.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            cull_by_level(&levels, curation.threshold_dbfs)?
        }
    })
}

/// Applies `curation` to a training split and returns the kept segments
/// together with the dropped ids.
pub fn curate_training<'a>(train: &[&'a Segment], curation: &CurationConfig) -> Result<(Vec<&'a Segment>, Vec<String>)> {
    if curation.method == CurationMethod::Variance && curation.ratio == 0.0 {
        curation.validate()?;
        return Ok((train.to_vec(), Vec::new()));
    }
    let report = curation_report(train, curation)?;
    let kept = report.kept_set();
    Ok((
        train.iter().copied().filter(|s| kept.contains(s.id.as_str())).collect(),
        report.dropped_ids,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub train_segments: usize,
    pub test_segments: usize,
    pub dropped_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub classes: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Rows are true classes, columns predictions, summed over folds.
    pub confusion: Vec<Vec<u64>>,
    pub evaluation_accuracy: Option<f64>,
}

impl ExperimentResult {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn split_segments<'a>(segments: &'a [Segment], clips: &[String]) -> Vec<&'a Segment> {
    let set: HashSet<&str> = clips.iter().map(String::as_str).collect();
    segments.iter().filter(|s| set.contains(s.clip.as_str())).collect()
}

/// Training and test segments of `fold` (1-based).
pub fn fold_segments<'a>(ds: &Dataset, segments: &'a [Segment], fold: usize) -> Result<(Vec<&'a Segment>, Vec<&'a Segment>)> {
    let split = ds
        .folds
        .iter()
        .find(|f| f.index == fold)
        .ok_or_else(|| HarnessError::Invalid(format!("no fold {fold}; folds are 1..={}", ds.folds.len())))?;
    Ok((split_segments(segments, &split.train), split_segments(segments, &split.test)))
}

fn score(
    classifier: &dyn SegmentClassifier,
    test: &[&Segment],
    confusion: &mut [Vec<u64>],
) -> std::result::Result<f64, DynError> {
    let mut correct = 0;
    for s in test {
        let pred = classifier.classify(s)?;
        if pred >= confusion.len() {
            return Err(format!("prediction {pred} outside {} classes", confusion.len()).into());
        }
        confusion[s.label][pred] += 1;
        correct += usize::from(pred == s.label);
    }
    Ok(if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 })
}

/// Four-fold cross-validation. Curation touches only each fold's training
/// split; the mean accuracy is the unweighted mean over folds.
pub fn run_cv(ds: &Dataset, segments: &[Segment], trainer: &dyn Trainer, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.curation.validate()?;
    let c = ds.classes.len();
    let mut confusion = vec![vec![0u64; c]; c];
    let mut folds = Vec::new();
    for split in &ds.folds {
        let (train_all, test) = fold_segments(ds, segments, split.index)?;
        let (train, dropped_ids) = curate_training(&train_all, &cfg.curation)?;
        info!(
            "fold {}: {} training segments ({} dropped), {} test segments",
            split.index,
            train.len(),
            dropped_ids.len(),
            test.len()
        );
        let wrap = |source: DynError| HarnessError::Fold { fold: split.index, source };
        let classifier = trainer.fit(&train, c, split.index).map_err(wrap)?;
        let accuracy = score(classifier.as_ref(), &test, &mut confusion).map_err(wrap)?;
        info!("fold {}: accuracy {accuracy:.4}", split.index);
        folds.push(FoldResult {
            fold: split.index,
            accuracy,
            train_segments: train.len(),
            test_segments: test.len(),
            dropped_ids,
        });
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len().max(1) as f64;
    let evaluation_accuracy = match (&ds.evaluation, cfg.evaluate) {
        (Some(eval), true) => {
            let eval_set: HashSet<&str> = eval.iter().map(String::as_str).collect();
            let dev: Vec<&Segment> = segments.iter().filter(|s| !eval_set.contains(s.clip.as_str())).collect();
            let (train, _) = curate_training(&dev, &cfg.curation)?;
            let test = split_segments(segments, eval);
            let wrap = |source: DynError| HarnessError::Fold { fold: 0, source };
            let classifier = trainer.fit(&train, c, 0).map_err(wrap)?;
            let mut scratch = vec![vec![0u64; c]; c];
            Some(score(classifier.as_ref(), &test, &mut scratch).map_err(wrap)?)
        }
        _ => None,
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        classes: ds.classes.clone(),
        folds,
        mean_accuracy,
        confusion,
        evaluation_accuracy,
    })
}

pub fn append_result(path: &Path, result: &ExperimentResult) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    writeln!(f, "{}", result.to_json_line()?).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_results(path: &Path) -> Result<Vec<ExperimentResult>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn row_label(r: &ExperimentResult) -> String {
    let base = r.config.model.display_name();
    if r.config.curated() {
        format!("{base} with sample dropout")
    } else {
        base.to_string()
    }
}

fn dropout_label(r: &ExperimentResult) -> String {
    match r.config.curation.method {
        CurationMethod::Variance => format!("{}", r.config.curation.ratio),
        CurationMethod::Silence => format!("silence < {} dBFS", r.config.curation.threshold_dbfs),
    }
}

/// Rows ordered as uncurated methods first, then curated ones, each by
/// method and ratio.
pub fn report_order(results: &[ExperimentResult]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..results.len()).collect();
    idx.sort_by(|&a, &b| {
        let key = |r: &ExperimentResult| (r.config.curated(), r.config.model.rank(), r.config.curation.method as u8);
        key(&results[a])
            .cmp(&key(&results[b]))
            .then(results[a].config.curation.ratio.total_cmp(&results[b].config.curation.ratio))
    });
    idx
}

pub fn render_report(results: &[ExperimentResult]) -> String {
    let mut md = String::from("# Acoustic scene classification results\n\n");
    md.push_str("| Method | Sample dropout ratio | Cross-validation | Evaluation | Fold accuracies |\n");
    md.push_str("|---|---|---|---|---|\n");
    let order = report_order(results);
    for &i in &order {
        let r = &results[i];
        let folds: Vec<String> = r.folds.iter().map(|f| pct(f.accuracy)).collect();
        writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            row_label(r),
            dropout_label(r),
            pct(r.mean_accuracy),
            r.evaluation_accuracy.map_or("-".into(), pct),
            folds.join(", ")
        )
        .unwrap();
    }
    md.push_str("\n## Per-class accuracy\n");
    for (n, &i) in order.iter().enumerate() {
        let r = &results[i];
        writeln!(md, "\n### {}. {} ({})\n", n + 1, row_label(r), dropout_label(r)).unwrap();
        md.push_str("| Class | Correct | Total | Accuracy |\n|---|---|---|---|\n");
        for (c, row) in r.confusion.iter().enumerate() {
            let total: u64 = row.iter().sum();
            let acc = if total == 0 { 0.0 } else { row[c] as f64 / total as f64 };
            writeln!(md, "| {} | {} | {} | {} |", r.classes[c], row[c], total, pct(acc)).unwrap();
        }
        writeln!(md, "\nConfusion matrix: `confusion_{}.csv`", n + 1).unwrap();
    }
    md
}

pub fn confusion_csv(r: &ExperimentResult) -> String {
    let mut csv = String::from("true\\predicted");
    for c in &r.classes {
        csv.push(',');
        csv.push_str(c);
    }
    csv.push('\n');
    for (c, row) in r.confusion.iter().enumerate() {
        csv.push_str(&r.classes[c]);
        for v in row {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    csv
}

/// Writes `report.md` and one `confusion_<n>.csv` per row into `out_dir`.
pub fn write_report(results: &[ExperimentResult], out_dir: &Path) -> Result<PathBuf> {
    if results.is_empty() {
        return Err(HarnessError::Invalid("no results to report".into()));
    }
    let path = out_dir.join("report.md");
    write_text(&path, &render_report(results))?;
    for (n, &i) in report_order(results).iter().enumerate() {
        write_text(&out_dir.join(format!("confusion_{}.csv", n + 1)), &confusion_csv(&results[i]))?;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn write_dataset(dir: &Path, n: usize, overlap: bool) -> PathBuf {
        let classes = ["bus", "park", "home"];
        fs::write(dir.join("classes.txt"), classes.join("\n")).unwrap();
        let mut meta = String::from("relative_path\tscene_label\n");
        for i in 0..n {
            writeln!(meta, "audio/{i}.wav\t{}", classes[i % 3]).unwrap();
        }
        fs::write(dir.join("meta.tsv"), meta).unwrap();
        let folds = dir.join("folds");
        fs::create_dir_all(&folds).unwrap();
        for k in 0..4 {
            let mut test = String::from("relative_path\n");
            let mut train = String::from("relative_path\n");
            for i in 0..n {
                let t = if i % 4 == k { &mut test } else { &mut train };
                writeln!(t, "audio/{i}.wav").unwrap();
            }
            if overlap && k == 1 {
                test.push_str("audio/0.wav\n");
            }
            fs::write(folds.join(format!("fold{}_train.tsv", k + 1)), train).unwrap();
            fs::write(folds.join(format!("fold{}_test.tsv", k + 1)), test).unwrap();
        }
        folds
    }

    #[test]
    fn balanced_partition_loads() {
        let dir = tempfile::tempdir().unwrap();
        let folds = write_dataset(dir.path(), 12, false);
        let ds = load_metadata(&dir.path().join("meta.tsv"), &folds).unwrap();
        assert_eq!(ds.classes.len(), 3);
        let mut all: Vec<&String> = ds.folds.iter().flat_map(|f| &f.test).collect();
        assert!(ds.folds.iter().all(|f| f.test.len() == 3));
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 12);
    }

    #[test]
    fn overlapping_test_folds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let folds = write_dataset(dir.path(), 12, true);
        let err = load_metadata(&dir.path().join("meta.tsv"), &folds).unwrap_err();
        assert!(matches!(err, HarnessError::OverlappingFolds(ref p) if p == "audio/0.wav"), "{err}");
    }

    #[test]
    fn unknown_label_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let folds = write_dataset(dir.path(), 12, false);
        fs::remove_file(dir.path().join("classes.txt")).unwrap();
        let meta = "relative_path\tscene_label\naudio/0.wav\tairport\n";
        fs::write(dir.path().join("meta.tsv"), meta).unwrap();
        let err = load_metadata(&dir.path().join("meta.tsv"), &folds).unwrap_err();
        assert!(matches!(err, HarnessError::UnknownLabel { ref label, .. } if label == "airport"));
        assert!(err.to_string().contains("airport"));
    }

    #[test]
    fn missing_files_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_metadata(&dir.path().join("meta.tsv"), dir.path()).unwrap_err();
        assert!(matches!(err, HarnessError::MissingFile(_)));
    }

    struct Oracle;
    struct Majority;
    impl SegmentClassifier for Oracle {
        fn classify(&self, s: &Segment) -> std::result::Result<usize, DynError> {
            Ok(s.label)
        }
    }
    impl Trainer for Oracle {
        fn fit(&self, _: &[&Segment], _: usize, _: usize) -> std::result::Result<Box<dyn SegmentClassifier>, DynError> {
            Ok(Box::new(Oracle))
        }
    }
    struct Constant(usize);
    impl SegmentClassifier for Constant {
        fn classify(&self, _: &Segment) -> std::result::Result<usize, DynError> {
            Ok(self.0)
        }
    }
    impl Trainer for Majority {
        fn fit(&self, train: &[&Segment], c: usize, _: usize) -> std::result::Result<Box<dyn SegmentClassifier>, DynError> {
            let mut counts = vec![0; c];
            train.iter().for_each(|s| counts[s.label] += 1);
            let best = (0..c).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();
            Ok(Box::new(Constant(best)))
        }
    }

    fn memory_segments(ds: &Dataset) -> Vec<Segment> {
        ds.clips
            .iter()
            .enumerate()
            .map(|(i, c)| Segment {
                id: format!("{}#0", c.relative_path),
                clip: c.relative_path.clone(),
                label: c.label,
                logmel: None,
                mfcc: None,
                variance: Some(i as f64),
                level_dbfs: None,
            })
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly_with_diagonal_confusion() {
        let dir = tempfile::tempdir().unwrap();
        let folds = write_dataset(dir.path(), 24, false);
        let ds = load_metadata(&dir.path().join("meta.tsv"), &folds).unwrap();
        let segs = memory_segments(&ds);
        let r = run_cv(&ds, &segs, &Oracle, &ExperimentConfig::new(ModelKind::Gmm)).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v > 0, i == j);
            }
        }
        assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 24);
    }

    #[test]
    fn constant_predictor_scores_chance_on_balanced_classes() {
        let dir = tempfile::tempdir().unwrap();
        // 3 classes, test folds of 6 with two clips per class.
        let folds = write_dataset(dir.path(), 24, false);
        let ds = load_metadata(&dir.path().join("meta.tsv"), &folds).unwrap();
        let segs = memory_segments(&ds);
        let r = run_cv(&ds, &segs, &Majority, &ExperimentConfig::new(ModelKind::Gmm)).unwrap();
        assert!((r.mean_accuracy - 1.0 / 3.0).abs() < 1e-12, "{}", r.mean_accuracy);
    }

    #[test]
    fn curation_only_touches_training_split() {
        let dir = tempfile::tempdir().unwrap();
        let folds = write_dataset(dir.path(), 24, false);
        let ds = load_metadata(&dir.path().join("meta.tsv"), &folds).unwrap();
        let segs = memory_segments(&ds);
        let mut cfg = ExperimentConfig::new(ModelKind::Gmm);
        cfg.curation = CurationConfig::variance(0.25);
        let r = run_cv(&ds, &segs, &Oracle, &cfg).unwrap();
        for f in &r.folds {
            assert_eq!(f.test_segments, 6);
            assert_eq!(f.train_segments, 18 - 4);
            assert_eq!(f.dropped_ids.len(), 4);
            let test = &ds.folds[f.fold - 1].test;
            assert!(f.dropped_ids.iter().all(|id| !test.contains(&parent_of_segment(id).to_string())));
        }
        assert_eq!(r.mean_accuracy, 1.0);
    }

    #[test]
    fn ratio_zero_needs_no_variances() {
        let dir = tempfile::tempdir().unwrap();
        let folds = write_dataset(dir.path(), 12, false);
        let ds = load_metadata(&dir.path().join("meta.tsv"), &folds).unwrap();
        let mut segs = memory_segments(&ds);
        segs.iter_mut().for_each(|s| s.variance = None);
        let r = run_cv(&ds, &segs, &Oracle, &ExperimentConfig::new(ModelKind::Gmm)).unwrap();
        assert!(r.folds.iter().all(|f| f.dropped_ids.is_empty() && f.train_segments == 9));
        let mut cfg = ExperimentConfig::new(ModelKind::Gmm);
        cfg.curation = CurationConfig::variance(0.1);
        assert!(run_cv(&ds, &segs, &Oracle, &cfg).is_err());
    }

    #[test]
    fn results_round_trip_and_report_orders_rows() {
        let dir = tempfile::tempdir().unwrap();
        let folds = write_dataset(dir.path(), 24, false);
        let ds = load_metadata(&dir.path().join("meta.tsv"), &folds).unwrap();
        let segs = memory_segments(&ds);
        let mut results = Vec::new();
        for (model, ratio) in [(ModelKind::MsDenseNet, 0.1), (ModelKind::Gmm, 0.0), (ModelKind::DenseNet, 0.0)] {
            let mut cfg = ExperimentConfig::new(model);
            cfg.curation = CurationConfig::variance(ratio);
            results.push(run_cv(&ds, &segs, &Majority, &cfg).unwrap());
        }
        let path = dir.path().join("results.jsonl");
        results.iter().for_each(|r| append_result(&path, r).unwrap());
        assert_eq!(read_results(&path).unwrap(), results);
        let report = write_report(&results, dir.path()).unwrap();
        let md = fs::read_to_string(report).unwrap();
        let gmm = md.find("| Baseline (GMM) |").unwrap();
        let dn = md.find("| DenseNet |").unwrap();
        let ms = md.find("| Multi-scale DenseNet with sample dropout |").unwrap();
        assert!(gmm < dn && dn < ms);
        assert!(dir.path().join("confusion_3.csv").exists());
    }
}
