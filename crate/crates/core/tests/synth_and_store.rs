use asc_core::audio_io::read_wav;
use asc_core::curation::sample_variance;
use asc_core::dsp::{FeatureConfig, FeatureKind, FeatureRecord};
use asc_core::harness::{load_metadata, load_segments};
use asc_core::store::FeatureStore;
use asc_core::synthgen::{generate_dataset, SynthConfig};
use ndarray::Array2;
use std::fs;

fn small(seed: u64, outlier_frac: f64) -> SynthConfig {
    SynthConfig {
        num_classes: 4,
        segments_per_class: 10,
        seed,
        outlier_frac,
        outlier_mislabel: true,
        duration_s: 2.0,
        ..SynthConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ds = generate_dataset(&small(5, 0.1), a.path()).unwrap();
    generate_dataset(&small(5, 0.1), b.path()).unwrap();
    for seg in &ds.segments {
        let x = fs::read(a.path().join(&seg.relative_path)).unwrap();
        let y = fs::read(b.path().join(&seg.relative_path)).unwrap();
        assert_eq!(x, y, "{}", seg.relative_path);
    }
    for f in ["meta.tsv", "outliers_truth.tsv", "folds/fold3_test.tsv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small(6, 0.1), c.path()).unwrap();
    let p = &ds.segments[0].relative_path;
    assert_ne!(fs::read(a.path().join(p)).unwrap(), fs::read(c.path().join(p)).unwrap());
}

#[test]
fn outliers_sit_below_the_clean_variance_fifth_percentile() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(11, 0.1), dir.path()).unwrap();
    let outliers = ds.outlier_ids();
    assert_eq!(outliers.len(), 4);
    let cfg = FeatureConfig::default();
    let mut clean = Vec::new();
    let mut odd = Vec::new();
    for seg in &ds.segments {
        let clip = read_wav(&dir.path().join(&seg.relative_path), &seg.relative_path).unwrap();
        let v = sample_variance(&cfg.logmel(&clip).unwrap()).unwrap();
        if seg.is_outlier { odd.push(v) } else { clean.push(v) }
    }
    clean.sort_by(f64::total_cmp);
    let p5 = clean[(0.05 * clean.len() as f64).floor() as usize];
    assert!(odd.iter().all(|&v| v < p5), "outliers {odd:?}, clean p5 {p5}");
}

#[test]
fn generated_metadata_loads_and_features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(2, 0.0), dir.path()).unwrap();
    let ds = load_metadata(&dir.path().join("meta.tsv"), &dir.path().join("folds")).unwrap();
    assert_eq!(ds.clips.len(), 40);
    assert_eq!(ds.folds.iter().map(|f| f.test.len()).sum::<usize>(), 40);
    assert!(ds.folds.iter().all(|f| f.test.len() + f.train.len() == 40 && f.test.len() >= 8));
    let mut store = FeatureStore::open_or_create(dir.path().join("features")).unwrap();
    asc_core::harness::featurize(&ds, dir.path(), &mut store, FeatureKind::Mfcc, &FeatureConfig::default(), 2.0).unwrap();
    let reopened = FeatureStore::open(dir.path().join("features")).unwrap();
    let segs = load_segments(&ds, &reopened, &[FeatureKind::Mfcc]).unwrap();
    assert_eq!(segs.len(), 40);
    assert!(segs.iter().all(|s| s.mfcc.as_ref().unwrap().ncols() == 60));
}

#[test]
fn feature_files_rewrite_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = Array2::from_shape_fn((128, 37), |(i, j)| ((i * 31 + j * 7) % 97) as f64 / 7.0 - 3.0);
    let mut store = FeatureStore::open_or_create(dir.path()).unwrap();
    let entry = store.put(&FeatureRecord::new("a.wav#0", Some(1), FeatureKind::LogMel, data)).unwrap().clone();
    store.save().unwrap();
    let first = fs::read(dir.path().join(&entry.relative_path)).unwrap();
    let rec = store.load(&entry).unwrap();
    store.put(&rec).unwrap();
    store.save().unwrap();
    assert_eq!(first, fs::read(dir.path().join(&entry.relative_path)).unwrap());
}
