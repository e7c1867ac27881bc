//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any check fails.

use asc_autograd::run_gradient_suite;
use asc_core::audio_io::AudioClip;
use asc_core::curation::{cull_low_variance, drop_count};
use asc_core::dsp::*;
use asc_core::gmm::{em_fit, EmOptions, GmmBank};
use asc_core::harness::{read_results, ExperimentResult};
use asc_core::models::{build_densenet, DenseNetConfig, MultiScaleSpec};
use asc_core::store::{decode_ascf, encode_ascf};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

struct Outcome {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn asc(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_asc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`asc {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn last_result(path: &Path) -> Result<ExperimentResult, String> {
    read_results(path).map_err(|e| e.to_string())?.pop().ok_or_else(|| "no result line".into())
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let checks = run_gradient_suite(5, 42);
    let elapsed = t.elapsed();
    let required = [
        "conv2d",
        "batchnorm2d",
        "relu",
        "avg_pool_2x2",
        "global_avg_pool",
        "concat_channels",
        "linear",
        "softmax_cross_entropy",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !checks.iter().any(|c| c.op.starts_with(r))).collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed(1e-5) || c.points < 5).map(|c| c.op).collect();
    check(
        missing.is_empty() && failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} operator checks, worst rel error {worst:.2e}, {:.1}s; missing {missing:?}, failing {failed:?}",
            checks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn dsp_oracles() -> Outcome {
    let mut notes = Vec::new();
    let fb = mel_filterbank(44_100, 2048, 128, 0.0, 22_050.0).unwrap();
    let peak_err = fb
        .weights
        .rows()
        .into_iter()
        .map(|r| (r.iter().copied().fold(f64::MIN, f64::max) - 1.0).abs())
        .fold(0.0, f64::max);
    notes.push(format!("filter peak error {peak_err:.1e}"));

    let c = mfcc_frames(Array2::from_elem((MFCC_BANDS, 4), 1.7).view()).unwrap();
    let mfcc_err = (0..4)
        .flat_map(|t| (1..MFCC_COEFFS).map(move |k| (t, k)))
        .map(|(t, k)| c[[t, k]].abs())
        .fold(0.0, f64::max);
    notes.push(format!("constant-frame c1..c19 max {mfcc_err:.1e}"));

    let ramp = Array2::from_shape_fn((50, 1), |(t, _)| 3.0 + t as f64);
    let d = delta_features(ramp.view(), 9).unwrap();
    let delta_err = (4..46).map(|t| (d[[t, 1]] - 1.0).abs()).fold(0.0, f64::max);
    notes.push(format!("ramp delta error {delta_err:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut bad_counts = 0;
    for _ in 0..100 {
        let len = rng.random_range(1764..20_000);
        let clip = AudioClip::new(vec![0.01; len], 44_100, "x").unwrap();
        let spec = stft_magnitude(&clip, 40.0, 0.5).unwrap();
        let (frame, hop) = (1764, 882);
        if spec.n_frames() != 1 + (len - frame) / hop {
            bad_counts += 1;
        }
    }
    notes.push(format!("{bad_counts}/100 frame-count mismatches"));
    check(
        peak_err <= 1e-6 && mfcc_err <= 1e-9 && delta_err <= 1e-12 && bad_counts == 0,
        notes.join(", "),
    )
}

fn curation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let recs: Vec<(String, f64)> = (0..1000)
        .map(|i| (format!("clip{i:04}.wav#0"), rng.random_range(0..200) as f64 * 0.25))
        .collect();
    let var = |id: &str| recs.iter().find(|(r, _)| r == id).unwrap().1;
    let mut violations = Vec::new();
    let mut prev: BTreeSet<String> = BTreeSet::new();
    for step in 0..=100 {
        let ratio = step as f64 / 100.0;
        let r = cull_low_variance(&recs, ratio).unwrap();
        let dropped: BTreeSet<String> = r.dropped_ids.iter().cloned().collect();
        if r.dropped_ids.len() != drop_count(ratio, 1000) || r.dropped_ids.len() + r.kept_ids.len() != 1000 {
            violations.push(format!("count at {ratio}"));
        }
        if r.kept_ids.iter().any(|k| dropped.contains(k)) {
            violations.push(format!("overlap at {ratio}"));
        }
        let max_drop = r.dropped_ids.iter().map(|d| var(d)).fold(f64::MIN, f64::max);
        if r.kept_ids.iter().any(|k| var(k) < max_drop) {
            violations.push(format!("order at {ratio}"));
        }
        if !r.dropped_ids.windows(2).all(|w| (var(&w[0]), &w[0]) <= (var(&w[1]), &w[1])) {
            violations.push(format!("sorting at {ratio}"));
        }
        if !prev.is_subset(&dropped) {
            violations.push(format!("monotonicity at {ratio}"));
        }
        prev = dropped;
    }
    let grid: Vec<usize> = [0.0, 0.01, 0.1, 0.2]
        .iter()
        .map(|&r| cull_low_variance(&recs, r).unwrap().dropped_ids.len())
        .collect();
    check(
        violations.is_empty() && grid == [0, 10, 100, 200],
        format!("101 ratios checked, violations {violations:?}; grid drops {grid:?}"),
    )
}

fn gmm_checks() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    use rand_distr::Distribution;
    let random = Array2::from_shape_fn((1000, 6), |_| normal.sample(&mut rng));
    let fit = em_fit(
        random.view(),
        &EmOptions {
            components: 8,
            max_iters: 50,
            tol: 0.0,
            ..EmOptions::default()
        },
    )
    .unwrap();
    let worst_drop = fit
        .avg_log_likelihood
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::MIN, f64::max);
    let monotone = worst_drop <= 1e-8;

    let two = Array2::from_shape_fn((1000, 2), |(i, _)| normal.sample(&mut rng) * 0.5 + if i % 2 == 0 { -3.0 } else { 3.0 });
    let g = em_fit(
        two.view(),
        &EmOptions {
            components: 2,
            ..EmOptions::default()
        },
    )
    .unwrap()
    .mixture;
    let mut centres: Vec<f64> = g.means.rows().into_iter().map(|r| r[0]).collect();
    centres.sort_by(f64::total_cmp);
    let recovered = g
        .means
        .rows()
        .into_iter()
        .all(|r| r.iter().all(|&m| (m.abs() - 3.0).abs() <= 0.2) && (r[0] - r[1]).abs() < 0.4);
    let elapsed = t.elapsed();
    check(
        monotone && recovered && elapsed < Duration::from_secs(30),
        format!(
            "{} iterations, largest step-to-step decrease {worst_drop:.1e} (negative means none); recovered means {centres:.3?}; {:.1}s",
            fit.avg_log_likelihood.len() - 1,
            elapsed.as_secs_f64()
        ),
    )
}

fn architecture() -> Outcome {
    let ms = build_densenet(&DenseNetConfig::default_multiscale(15), 0).unwrap();
    let trace = ms.structural_trace();
    let shape = |s: &str| trace.iter().find(|e| e.stage == s).map(|e| e.shape.clone()).unwrap_or_default();
    let block1 = shape("block1");
    let spatial: Vec<usize> = ["block1", "block2", "block3", "block4"].iter().map(|b| shape(b).get(1).copied().unwrap_or(0)).collect();
    let traced_ok = {
        let (_, executed) = ms.forward_traced(&vec![0.0; 128 * 128], 1).unwrap();
        executed == trace
    };

    let single = DenseNetConfig::default_single(15);
    let mut degenerate = single.clone();
    degenerate.block_layers[0] = single.block_layers[0];
    degenerate.multiscale = Some(MultiScaleSpec {
        layer_specs: vec![(3, single.growth_rate); single.block_layers[0]],
    });
    let same_inventory = build_densenet(&single, 0).unwrap().shape_inventory() == build_densenet(&degenerate, 0).unwrap().shape_inventory();
    check(
        block1.first() == Some(&104) && spatial == [128, 64, 32, 16] && traced_ok && same_inventory,
        format!(
            "block1 {block1:?}, block spatial sizes {spatial:?}, executed trace matches walk: {traced_ok}, degenerate inventory equal: {same_inventory}"
        ),
    )
}

fn end_to_end(dir: &Path) -> Result<Outcome, String> {
    let data = dir.join("default");
    asc(&["synth", "--out", p(&data), "--seed", "42"])?;
    asc(&["featurize", "--data", p(&data)])?;
    let ms_results = data.join("ms.jsonl");
    let t = Instant::now();
    asc(&[
        "cv", "--data", p(&data), "--model", "msdensenet", "--preset", "tiny", "--epochs", "4", "--batch-size", "16", "--lr", "2e-3",
        "--results", p(&ms_results),
    ])?;
    let ms_time = t.elapsed();
    let gmm_results = data.join("gmm.jsonl");
    asc(&["cv", "--data", p(&data), "--model", "gmm", "--results", p(&gmm_results)])?;
    let ms = last_result(&ms_results)?;
    let gmm = last_result(&gmm_results)?;
    Ok(check(
        ms.mean_accuracy >= 0.8 && gmm.mean_accuracy >= 0.4 && ms_time <= Duration::from_secs(15 * 60),
        format!(
            "tiny multi-scale DenseNet {:.1}% in {:.1} min; GMM {:.1}%",
            100.0 * ms.mean_accuracy,
            ms_time.as_secs_f64() / 60.0,
            100.0 * gmm.mean_accuracy
        ),
    ))
}

fn dropout_efficacy(dir: &Path) -> Result<Outcome, String> {
    let seeds = [42u64, 7, 123];
    let (mut base, mut curated) = (Vec::new(), Vec::new());
    let mut all_dropped = true;
    let mut fold_notes = Vec::new();
    for seed in seeds {
        let data = dir.join(format!("outliers{seed}"));
        let s = seed.to_string();
        asc(&["synth", "--out", p(&data), "--seed", &s, "--outlier-frac", "0.05", "--mislabel"])?;
        asc(&["featurize", "--data", p(&data)])?;
        let truth: BTreeSet<String> = std::fs::read_to_string(data.join("outliers_truth.tsv"))
            .map_err(|e| e.to_string())?
            .lines()
            .skip(1)
            .filter(|l| l.split('\t').nth(1) == Some("true"))
            .map(|l| l.split('\t').next().unwrap().to_string())
            .collect();
        for (ratio, sink) in [("0", &mut base), ("0.05", &mut curated)] {
            let out = data.join(format!("cv{ratio}.jsonl"));
            asc(&["cv", "--data", p(&data), "--model", "gmm", "--seed", &s, "--ratio", ratio, "--results", p(&out)])?;
            let r = last_result(&out)?;
            if ratio != "0" {
                let per_fold: Vec<String> = r
                    .folds
                    .iter()
                    .map(|f| {
                        let hit = f.dropped_ids.iter().filter(|d| truth.contains(*d)).count();
                        format!("{hit}/{}", f.dropped_ids.len())
                    })
                    .collect();
                fold_notes.push(format!("seed {seed} outliers among fold drops {}", per_fold.join(" ")));
            }
            sink.push(r.mean_accuracy);
        }
        let tsv = data.join("curation.tsv");
        asc(&["curate", "--data", p(&data), "--ratio", "0.05", "--out", p(&tsv)])?;
        let dropped: BTreeSet<String> = std::fs::read_to_string(&tsv)
            .map_err(|e| e.to_string())?
            .lines()
            .filter(|l| l.ends_with("\tdropped"))
            .map(|l| l.split('\t').next().unwrap().to_string())
            .collect();
        all_dropped &= !truth.is_empty() && truth.is_subset(&dropped);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m0, m5) = (mean(&base), mean(&curated));
    Ok(check(
        m5 + 1e-12 >= m0 && all_dropped,
        format!(
            "GMM mean CV over seeds {seeds:?}: ratio 0 {:.2}% {base:.3?}, ratio 0.05 {:.2}% {curated:.3?}; every outlier dropped by whole-set curation: {all_dropped}; {}",
            100.0 * m0,
            100.0 * m5,
            fold_notes.join("; ")
        ),
    ))
}

fn determinism(dir: &Path) -> Result<Outcome, String> {
    let data = dir.join("default");
    let (a, b) = (data.join("det_a.jsonl"), data.join("det_b.jsonl"));
    for out in [&a, &b] {
        asc(&[
            "--deterministic", "cv", "--data", p(&data), "--model", "gmm", "--components", "8", "--max-iters", "30", "--ratio", "0.1",
            "--results", p(out),
        ])?;
    }
    let (x, y) = (std::fs::read(&a).map_err(|e| e.to_string())?, std::fs::read(&b).map_err(|e| e.to_string())?);
    Ok(check(x == y && !x.is_empty(), format!("two results files of {} and {} bytes, identical: {}", x.len(), y.len(), x == y)))
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let feat = Array2::from_shape_fn((128, 64), |_| rng.random_range(-20.0..5.0));
    let a1 = encode_ascf(&feat);
    let a2 = encode_ascf(&decode_ascf(&a1).unwrap());

    let cfg = DenseNetConfig::preset("tiny-multiscale", 5).unwrap();
    let model = build_densenet(&cfg, 9).unwrap();
    let mut p1 = Vec::new();
    model.write_checkpoint(&mut p1).unwrap();
    let mut fresh = build_densenet(&cfg, 1).unwrap();
    fresh.read_checkpoint(&p1[..]).unwrap();
    let mut p2 = Vec::new();
    fresh.write_checkpoint(&mut p2).unwrap();

    let frames = Array2::from_shape_fn((300, 60), |_| rng.random_range(-1.0..1.0));
    let g = em_fit(
        frames.view(),
        &EmOptions {
            components: 4,
            max_iters: 10,
            ..EmOptions::default()
        },
    )
    .unwrap()
    .mixture;
    let bank = GmmBank {
        class_names: vec!["bus".into(), "park".into()],
        mixtures: vec![g.clone(), g],
    };
    let mut g1 = Vec::new();
    bank.write_ascg(&mut g1).unwrap();
    let mut g2 = Vec::new();
    GmmBank::read_ascg(&g1[..]).unwrap().write_ascg(&mut g2).unwrap();
    check(
        a1 == a2 && p1 == p2 && g1 == g2 && p1.starts_with(b"ASCP") && g1.starts_with(b"ASCG"),
        format!(
            "feature file {} B identical: {}; checkpoint {} B identical: {}; GMM bank {} B identical: {}",
            a1.len(),
            a1 == a2,
            p1.len(),
            p1 == p2,
            g1.len(),
            g1 == g2
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    println!("N/A  [1] published accuracies need the DCASE 2017 corpus; desk-scale substitutes follow");
    let mut report = |n: usize, name: &str, outcome: Result<Outcome, String>| {
        let outcome = outcome.unwrap_or_else(|e| check(false, e));
        if !outcome.ok {
            failures += 1;
        }
        println!("{} [{n}] {name}: {}", if outcome.ok { "PASS" } else { "FAIL" }, outcome.detail);
    };
    report(2, "gradient suite", Ok(gradients()));
    report(3, "DSP oracles", Ok(dsp_oracles()));
    report(4, "curation properties", Ok(curation_properties()));
    report(5, "GMM EM", Ok(gmm_checks()));
    report(6, "architecture bookkeeping", Ok(architecture()));
    report(7, "end-to-end desk scale", end_to_end(dir.path()));
    report(8, "sample-dropout efficacy", dropout_efficacy(dir.path()));
    report(9, "determinism", determinism(dir.path()));
    report(10, "format round-trips", Ok(round_trips()));
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
