use crate::*;
use asc_autograd::run_gradient_suite;
use asc_core::curation::{CurationConfig, CurationMethod};
use asc_core::dsp::{FeatureConfig, FeatureKind};
use asc_core::gmm::{EmOptions, GmmBank};
use asc_core::harness::{
    self, append_result, attach_levels, curate_training, curation_report, fold_segments, load_metadata, load_segments, read_results,
    run_cv, write_report, Dataset, ExperimentConfig, GmmClassifier, GmmTrainer, HarnessError, ModelKind, NetClassifier, NetTrainer,
    Segment, SegmentClassifier,
};
use asc_core::models::{build_densenet, Aggregation, DenseNetConfig, TrainLog, TrainOptions};
use asc_core::store::FeatureStore;
use asc_core::synthgen::{generate_dataset, SynthConfig};
use log::info;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

type Outcome = Result<(), Failure>;

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        use HarnessError::*;
        match e {
            MissingFile(_) | UnknownLabel { .. } | OverlappingFolds(_) | TrainTestOverlap { .. } | MissingFromFolds(_)
            | UnknownSegment { .. } | Parse { .. } | NoFeatures { .. } | Invalid(_) => Failure::validation(e),
            Curation(ref c) if matches!(c, asc_core::curation::CurationError::InvalidRatio(_)) => Failure::validation(e),
            other => Failure::runtime(other),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    threads: Option<usize>,
    deterministic: bool,
    config: Option<&'a Path>,
    args: &'a T,
}

struct Ctx<'a> {
    cli: &'a Cli,
    threads: Option<usize>,
}

impl Ctx<'_> {
    fn manifest<T: Serialize>(&self, path: &Path, seed: Option<u64>, args: &T) -> Outcome {
        let m = Manifest {
            command: self.cli.command.name(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            threads: self.threads,
            deterministic: self.cli.deterministic,
            config: self.cli.config.as_deref(),
            args,
        };
        let text = serde_json::to_string_pretty(&m).map_err(Failure::runtime)? + "\n";
        write_file(path, text.as_bytes())?;
        info!("manifest written to {}", path.display());
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(cli: &Cli, threads: Option<usize>) -> Outcome {
    let ctx = Ctx { cli, threads };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Featurize(a) => featurize(&ctx, a),
        Command::Curate(a) => curate(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::BaselineGmm(a) => baseline_gmm(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Cv(a) => cv(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
    }
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        num_classes: a.classes,
        segments_per_class: a.segments_per_class,
        seed: a.seed,
        outlier_frac: a.outlier_frac,
        outlier_mislabel: a.mislabel,
        sample_rate_hz: a.sample_rate,
        duration_s: a.duration,
    };
    cfg.validate().map_err(Failure::validation)?;
    let ds = generate_dataset(&cfg, &a.out).map_err(Failure::runtime)?;
    println!(
        "wrote {} segments over {} classes ({} outliers) to {}",
        ds.segments.len(),
        ds.classes.len(),
        ds.outlier_ids().len(),
        a.out.display()
    );
    ctx.manifest(&a.out.join("manifest_synth.json"), Some(a.seed), a)
}

fn dataset(d: &DataArgs) -> Result<Dataset, Failure> {
    Ok(load_metadata(&d.meta_path(), &d.folds_dir())?)
}

fn open_store(d: &DataArgs) -> Result<FeatureStore, Failure> {
    let dir = d.features_dir();
    if !dir.join(asc_core::store::MANIFEST).exists() {
        return Err(Failure::validation(format!(
            "no feature store at {}; run `asc featurize` first",
            dir.display()
        )));
    }
    FeatureStore::open(&dir).map_err(Failure::runtime)
}

fn featurize(ctx: &Ctx, a: &FeaturizeArgs) -> Outcome {
    let ds = dataset(&a.data)?;
    let features = FeatureConfig {
        frame_ms: a.frame_ms,
        overlap: a.overlap,
        ..FeatureConfig::default()
    };
    if !(a.frame_ms > 0.0) || !(0.0..1.0).contains(&a.overlap) || !(a.segment_seconds > 0.0) {
        return Err(Failure::validation("--frame-ms and --segment-seconds must be positive and --overlap in [0, 1)"));
    }
    let dir = a.data.features_dir();
    let mut store = FeatureStore::open_or_create(&dir).map_err(Failure::runtime)?;
    for &choice in &a.feature {
        let kind = match choice {
            FeatureChoice::Logmel128 => FeatureKind::LogMel,
            FeatureChoice::Mfcc60 => FeatureKind::Mfcc,
        };
        let n = harness::featurize(&ds, &a.data.data, &mut store, kind, &features, a.segment_seconds)?;
        println!("{kind}: {n} records in {}", dir.display());
    }
    if a.dump_image {
        let images = dir.join("images");
        let entries: Vec<_> = store.entries_of(FeatureKind::LogMel).cloned().collect();
        for e in &entries {
            store.dump_image(e, &images).map_err(Failure::runtime)?;
        }
        println!("{} images in {}", entries.len(), images.display());
    }
    ctx.manifest(&dir.join("manifest_featurize.json"), None, a)
}

fn curation_config(a: &CurationArgs) -> Result<CurationConfig, Failure> {
    let cfg = match a.method {
        MethodChoice::Variance => CurationConfig::variance(a.ratio),
        MethodChoice::Silence => CurationConfig::silence(a.threshold_dbfs),
    };
    cfg.validate().map_err(Failure::validation)?;
    Ok(cfg)
}

/// Loads the segments `kinds` plus whatever `curation` needs.
fn segments(d: &DataArgs, ds: &Dataset, mut kinds: Vec<FeatureKind>, curation: &CurationArgs) -> Result<Vec<Segment>, Failure> {
    let cfg = curation_config(curation)?;
    if cfg.method == CurationMethod::Variance && cfg.ratio > 0.0 && !kinds.contains(&FeatureKind::LogMel) {
        kinds.push(FeatureKind::LogMel);
    }
    let store = open_store(d)?;
    let mut segs = load_segments(ds, &store, &kinds)?;
    if cfg.method == CurationMethod::Silence {
        attach_levels(&mut segs, &d.data, curation.segment_seconds)?;
    }
    Ok(segs)
}

fn check_fold(ds: &Dataset, fold: usize) -> Outcome {
    if !(1..=ds.folds.len()).contains(&fold) {
        return Err(Failure::validation(format!("--fold must be in 1..={}, got {fold}", ds.folds.len())));
    }
    Ok(())
}

fn curate(ctx: &Ctx, a: &CurateArgs) -> Outcome {
    let ds = dataset(&a.data)?;
    let cfg = curation_config(&a.curation)?;
    let segs = segments(&a.data, &ds, vec![FeatureKind::LogMel], &a.curation)?;
    let pool: Vec<&Segment> = match a.fold {
        Some(k) => {
            check_fold(&ds, k)?;
            fold_segments(&ds, &segs, k)?.0
        }
        None => segs.iter().collect(),
    };
    let report = curation_report(&pool, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| a.data.data.join("curation.tsv"));
    report.write_tsv(&out).map_err(Failure::runtime)?;
    println!(
        "kept {} of {} segments, dropped {}; report in {}",
        report.kept_ids.len(),
        pool.len(),
        report.dropped_ids.len(),
        out.display()
    );
    ctx.manifest(&sibling(&out, ".manifest.json"), None, a)
}

fn train_options(n: &NetArgs, seed: u64) -> TrainOptions {
    TrainOptions {
        epochs: n.epochs,
        batch_size: n.batch_size,
        lr: n.lr,
        seed,
        early_stop_patience: n.patience,
    }
}

fn aggregation(c: AggregationChoice) -> Aggregation {
    match c {
        AggregationChoice::MeanLogprob => Aggregation::MeanLogprob,
        AggregationChoice::Majority => Aggregation::Majority,
    }
}

fn preset_name(p: PresetChoice) -> &'static str {
    match p {
        PresetChoice::Default => "default",
        PresetChoice::Tiny => "tiny",
    }
}

fn model_kind(m: ModelChoice) -> ModelKind {
    match m {
        ModelChoice::Gmm => ModelKind::Gmm,
        ModelChoice::Densenet => ModelKind::DenseNet,
        ModelChoice::Msdensenet => ModelKind::MsDenseNet,
    }
}

/// What `evaluate` needs to rebuild a network checkpoint.
#[derive(Serialize, Deserialize)]
struct NetSidecar {
    model: ModelKind,
    network: DenseNetConfig,
    aggregation: Aggregation,
    classes: Vec<String>,
    seed: u64,
    train_log: TrainLog,
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let ds = dataset(&a.data)?;
    check_fold(&ds, a.fold)?;
    let kind = match a.model {
        NetChoice::Densenet => ModelKind::DenseNet,
        NetChoice::Msdensenet => ModelKind::MsDenseNet,
    };
    let mut exp = ExperimentConfig::new(kind);
    exp.preset = preset_name(a.net.preset).into();
    let network = exp.network_config(ds.classes.len())?;
    let segs = segments(&a.data, &ds, vec![FeatureKind::LogMel], &a.curation)?;
    let (train_all, test) = fold_segments(&ds, &segs, a.fold)?;
    let (train_segs, dropped) = curate_training(&train_all, &curation_config(&a.curation)?)?;
    info!("fold {}: dropped {} training segments", a.fold, dropped.len());
    let trainer = NetTrainer {
        config: network.clone(),
        options: train_options(&a.net, a.seed),
        val_fraction: a.net.val_fraction,
        aggregation: aggregation(a.net.aggregation),
        seed: a.seed,
    };
    let (model, log) = trainer.fit_model(&train_segs, a.fold).map_err(Failure::runtime)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.data
            .data
            .join("runs")
            .join(format!("{}-{}-fold{}.ascp", exp.model, exp.preset, a.fold))
    });
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).map_err(Failure::runtime)?;
    write_file(&out, &bytes)?;
    let sidecar = NetSidecar {
        model: kind,
        network,
        aggregation: trainer.aggregation,
        classes: ds.classes.clone(),
        seed: a.seed,
        train_log: log.clone(),
    };
    write_file(&sibling(&out, ".json"), (serde_json::to_string_pretty(&sidecar).map_err(Failure::runtime)? + "\n").as_bytes())?;
    let classifier = NetClassifier {
        model,
        aggregation: trainer.aggregation,
        patch_frames: trainer.config.input_size.1,
    };
    let (acc, _) = score(&classifier, &test, ds.classes.len())?;
    println!(
        "best validation patch accuracy {} at epoch {}; fold {} test accuracy {:.4}; checkpoint {}",
        log.best_val_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
        log.best_epoch,
        a.fold,
        acc,
        out.display()
    );
    ctx.manifest(&sibling(&out, ".manifest.json"), Some(a.seed), a)
}

fn score(c: &dyn SegmentClassifier, test: &[&Segment], classes: usize) -> Result<(f64, Vec<Vec<u64>>), Failure> {
    let mut confusion = vec![vec![0u64; classes]; classes];
    for s in test {
        let p = c.classify(s).map_err(Failure::runtime)?;
        if p >= classes {
            return Err(Failure::runtime(format!("prediction {p} outside {classes} classes")));
        }
        confusion[s.label][p] += 1;
    }
    let correct: u64 = (0..classes).map(|i| confusion[i][i]).sum();
    Ok((correct as f64 / test.len().max(1) as f64, confusion))
}

fn em_options(e: &EmArgs, seed: u64) -> EmOptions {
    EmOptions {
        components: e.components,
        max_iters: e.max_iters,
        tol: e.tol,
        seed,
        ..EmOptions::default()
    }
}

fn baseline_gmm(ctx: &Ctx, a: &GmmArgs) -> Outcome {
    let ds = dataset(&a.data)?;
    check_fold(&ds, a.fold)?;
    if a.em.components == 0 {
        return Err(Failure::validation("--components must be at least 1"));
    }
    let segs = segments(&a.data, &ds, vec![FeatureKind::Mfcc], &a.curation)?;
    let (train_all, test) = fold_segments(&ds, &segs, a.fold)?;
    let (train_segs, _) = curate_training(&train_all, &curation_config(&a.curation)?)?;
    let trainer = GmmTrainer {
        options: em_options(&a.em, a.seed),
        seed: a.seed,
        class_names: ds.classes.clone(),
    };
    let bank = trainer
        .fit_bank(&train_segs, ds.classes.len(), a.fold)
        .map_err(Failure::runtime)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.data.data.join("runs").join(format!("gmm-fold{}.ascg", a.fold)));
    let mut bytes = Vec::new();
    bank.write_ascg(&mut bytes).map_err(Failure::runtime)?;
    write_file(&out, &bytes)?;
    write_file(&sibling(&out, ".labels"), bank.labels_sidecar().as_bytes())?;
    let (acc, _) = score(&GmmClassifier(bank), &test, ds.classes.len())?;
    println!("fold {} test accuracy {acc:.4}; bank {}", a.fold, out.display());
    ctx.manifest(&sibling(&out, ".manifest.json"), Some(a.seed), a)
}

#[derive(Serialize)]
struct Evaluation<'a> {
    checkpoint: &'a Path,
    fold: usize,
    accuracy: f64,
    classes: &'a [String],
    confusion: Vec<Vec<u64>>,
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Outcome {
    let ds = dataset(&a.data)?;
    check_fold(&ds, a.fold)?;
    let bytes = fs::read(&a.checkpoint).map_err(|e| Failure::validation(format!("{}: {e}", a.checkpoint.display())))?;
    let no_curation = CurationArgs {
        method: MethodChoice::Variance,
        ratio: 0.0,
        threshold_dbfs: -60.0,
        segment_seconds: 10.0,
    };
    let (classifier, kind): (Box<dyn SegmentClassifier>, FeatureKind) = if bytes.starts_with(asc_core::gmm::ASCG_MAGIC) {
        let mut bank = GmmBank::read_ascg(&bytes[..]).map_err(Failure::runtime)?;
        if let Ok(text) = fs::read_to_string(sibling(&a.checkpoint, ".labels")) {
            bank.apply_labels_sidecar(&text).map_err(Failure::runtime)?;
        }
        if bank.mixtures.len() != ds.classes.len() {
            return Err(Failure::validation(format!(
                "bank has {} classes, metadata has {}",
                bank.mixtures.len(),
                ds.classes.len()
            )));
        }
        (Box::new(GmmClassifier(bank)), FeatureKind::Mfcc)
    } else {
        let side_path = sibling(&a.checkpoint, ".json");
        let text = fs::read_to_string(&side_path).map_err(|e| Failure::validation(format!("{}: {e}", side_path.display())))?;
        let side: NetSidecar = serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", side_path.display())))?;
        if side.classes != ds.classes {
            return Err(Failure::validation("checkpoint classes differ from the metadata class list"));
        }
        let mut model = build_densenet(&side.network, 0).map_err(Failure::runtime)?;
        model.read_checkpoint(&bytes[..]).map_err(Failure::runtime)?;
        let agg = a.aggregation.map(aggregation).unwrap_or(side.aggregation);
        (
            Box::new(NetClassifier {
                model,
                aggregation: agg,
                patch_frames: side.network.input_size.1,
            }),
            FeatureKind::LogMel,
        )
    };
    let segs = segments(&a.data, &ds, vec![kind], &no_curation)?;
    let (_, test) = fold_segments(&ds, &segs, a.fold)?;
    let (accuracy, confusion) = score(classifier.as_ref(), &test, ds.classes.len())?;
    println!("fold {} test accuracy {accuracy:.4} over {} segments", a.fold, test.len());
    let out = sibling(&a.checkpoint, &format!(".fold{}.eval.json", a.fold));
    let eval = Evaluation {
        checkpoint: &a.checkpoint,
        fold: a.fold,
        accuracy,
        classes: &ds.classes,
        confusion,
    };
    write_file(&out, (serde_json::to_string_pretty(&eval).map_err(Failure::runtime)? + "\n").as_bytes())?;
    ctx.manifest(&sibling(&out, ".manifest.json"), None, a)
}

fn cv(ctx: &Ctx, a: &CvArgs) -> Outcome {
    let ds = dataset(&a.data)?;
    let kind = model_kind(a.model);
    let exp = ExperimentConfig {
        model: kind,
        preset: preset_name(a.net.preset).into(),
        curation: curation_config(&a.curation)?,
        seed: a.seed,
        aggregation: aggregation(a.net.aggregation),
        train: train_options(&a.net, a.seed),
        val_fraction: a.net.val_fraction,
        gmm: em_options(&a.em, a.seed),
        evaluate: a.evaluate,
    };
    if a.evaluate && ds.evaluation.is_none() {
        return Err(Failure::validation(format!(
            "--evaluate needs {}",
            a.data.folds_dir().join("evaluate.tsv").display()
        )));
    }
    let trainer = harness::make_trainer(&exp, &ds.classes)?;
    let segs = segments(&a.data, &ds, vec![kind.needs()], &a.curation)?;
    let result = run_cv(&ds, &segs, trainer.as_ref(), &exp)?;
    let out = a.results.clone().unwrap_or_else(|| a.data.data.join("results.jsonl"));
    append_result(&out, &result)?;
    for f in &result.folds {
        println!(
            "fold {}: accuracy {:.4} ({} train, {} dropped, {} test)",
            f.fold,
            f.accuracy,
            f.train_segments,
            f.dropped_ids.len(),
            f.test_segments
        );
    }
    print!("{} mean CV accuracy {:.4}", kind, result.mean_accuracy);
    if let Some(e) = result.evaluation_accuracy {
        print!(", evaluation accuracy {e:.4}");
    }
    println!("; appended to {}", out.display());
    ctx.manifest(&sibling(&out, ".manifest.json"), Some(a.seed), a)
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Outcome {
    let results = read_results(&a.results)?;
    let path = write_report(&results, &a.out)?;
    println!("{} rows written to {}", results.len(), path.display());
    ctx.manifest(&a.out.join("manifest_report.json"), None, a)
}

#[derive(Serialize)]
struct GradRow {
    op: &'static str,
    points: usize,
    max_rel_error: f64,
    passed: bool,
}

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Outcome {
    if a.points == 0 {
        return Err(Failure::validation("--points must be at least 1"));
    }
    let rows: Vec<GradRow> = run_gradient_suite(a.points, a.seed)
        .into_iter()
        .map(|c| GradRow {
            passed: c.passed(a.tolerance),
            op: c.op,
            points: c.points,
            max_rel_error: c.max_rel_error,
        })
        .collect();
    println!("{:<24} {:>6} {:>14}  result", "operator", "points", "max rel error");
    for r in &rows {
        println!(
            "{:<24} {:>6} {:>14.3e}  {}",
            r.op,
            r.points,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    write_file(&a.out, (serde_json::to_string_pretty(&rows).map_err(Failure::runtime)? + "\n").as_bytes())?;
    ctx.manifest(&sibling(&a.out, ".manifest.json"), Some(a.seed), a)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}
