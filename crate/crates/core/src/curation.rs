//! Training-set sample dropout: rank-based low-variance culling and
//! level-based silence culling.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("feature matrix is empty")]
    EmptyFeature,
    #[error("dropout ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("segment id {0} appears more than once")]
    DuplicateId(String),
    #[error("record {0} has no sample variance")]
    MissingVariance(String),
    #[error("curation report line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = CurationError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurationMethod {
    Variance,
    Silence,
}

impl fmt::Display for CurationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurationMethod::Variance => "variance",
            CurationMethod::Silence => "silence",
        })
    }
}

impl std::str::FromStr for CurationMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "variance" => Ok(CurationMethod::Variance),
            "silence" => Ok(CurationMethod::Silence),
            other => Err(format!("unknown curation method `{other}` (expected variance or silence)")),
        }
    }
}

pub const DEFAULT_SILENCE_DBFS: f64 = -60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub method: CurationMethod,
    pub ratio: f64,
    pub threshold_dbfs: f64,
}

impl CurationConfig {
    pub fn variance(ratio: f64) -> Self {
        CurationConfig {
            method: CurationMethod::Variance,
            ratio,
            threshold_dbfs: DEFAULT_SILENCE_DBFS,
        }
    }

    pub fn silence(threshold_dbfs: f64) -> Self {
        CurationConfig {
            method: CurationMethod::Silence,
            ratio: 0.0,
            threshold_dbfs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(CurationError::InvalidRatio(self.ratio));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationReport {
    pub config: CurationConfig,
    /// Input order.
    pub kept_ids: Vec<String>,
    /// Ascending statistic, ties by id.
    pub dropped_ids: Vec<String>,
    pub statistic: BTreeMap<String, f64>,
}

impl CurationReport {
    pub fn kept_set(&self) -> HashSet<&str> {
        self.kept_ids.iter().map(String::as_str).collect()
    }

    pub fn dropped_set(&self) -> HashSet<&str> {
        self.dropped_ids.iter().map(String::as_str).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("segment_id\tstatistic\tdecision\n");
        let dropped = self.dropped_set();
        for id in self.kept_ids.iter().chain(&self.dropped_ids) {
            let decision = if dropped.contains(id.as_str()) { "dropped" } else { "kept" };
            out.push_str(&format!("{id}\t{}\t{decision}\n", self.statistic[id]));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_tsv())?)
    }

    /// Rebuilds a report from its TSV form; the config is not stored there.
    pub fn parse_tsv(text: &str, config: CurationConfig) -> Result<Self> {
        let mut report = CurationReport {
            config,
            kept_ids: Vec::new(),
            dropped_ids: Vec::new(),
            statistic: BTreeMap::new(),
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| CurationError::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 columns, found {}", f.len())));
            }
            let stat: f64 = f[1].parse().map_err(|_| bad(format!("bad statistic `{}`", f[1])))?;
            if report.statistic.insert(f[0].to_string(), stat).is_some() {
                return Err(CurationError::DuplicateId(f[0].to_string()));
            }
            match f[2] {
                "kept" => report.kept_ids.push(f[0].to_string()),
                "dropped" => report.dropped_ids.push(f[0].to_string()),
                other => return Err(bad(format!("bad decision `{other}`"))),
            }
        }
        Ok(report)
    }

    pub fn read_tsv(path: &Path, config: CurationConfig) -> Result<Self> {
        Self::parse_tsv(&fs::read_to_string(path)?, config)
    }
}

/// Population variance over all cells.
pub fn sample_variance(data: &Array2<f64>) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(CurationError::EmptyFeature);
    }
    // Shifting by one cell keeps the one-pass form accurate for data far from zero.
    let shift = data.iter().next().copied().unwrap();
    let (mut s1, mut s2) = (0.0, 0.0);
    for &v in data.iter() {
        let d = v - shift;
        s1 += d;
        s2 += d * d;
    }
    let mean = s1 / n as f64;
    Ok((s2 / n as f64 - mean * mean).max(0.0))
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(CurationError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Number of records dropped at `ratio` out of `n`.
pub fn drop_count(ratio: f64, n: usize) -> usize {
    // The epsilon keeps exact products such as 0.1 * 200 from flooring to 19.
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Drops the `floor(ratio * N)` lowest-variance records, ties broken by id.
pub fn cull_low_variance(records: &[(String, f64)], ratio: f64) -> Result<CurationReport> {
    let config = CurationConfig::variance(ratio);
    config.validate()?;
    check_unique(records.iter().map(|(id, _)| id.as_str()))?;
    let mut order: Vec<&(String, f64)> = records.iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let dropped_ids: Vec<String> = order[..drop_count(ratio, records.len())]
        .iter()
        .map(|(id, _)| id.clone())
        .collect();
    let dropped: HashSet<&str> = dropped_ids.iter().map(String::as_str).collect();
    Ok(CurationReport {
        config,
        kept_ids: records
            .iter()
            .filter(|(id, _)| !dropped.contains(id.as_str()))
            .map(|(id, _)| id.clone())
            .collect(),
        dropped_ids,
        statistic: records.iter().cloned().collect(),
    })
}

pub fn rms_dbfs(samples: &[f32]) -> f64 {
    let ms = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / samples.len() as f64
    };
    20.0 * (ms.sqrt() + 1e-12).log10()
}

/// Drops segments whose RMS level is below `threshold_dbfs`.
pub fn cull_silence(clips: &[(String, &[f32])], threshold_dbfs: f64) -> Result<CurationReport> {
    let levels: Vec<(String, f64)> = clips.iter().map(|(id, s)| (id.clone(), rms_dbfs(s))).collect();
    cull_by_level(&levels, threshold_dbfs)
}

/// [`cull_silence`] on precomputed `(id, dBFS)` levels.
pub fn cull_by_level(levels: &[(String, f64)], threshold_dbfs: f64) -> Result<CurationReport> {
    check_unique(levels.iter().map(|(id, _)| id.as_str()))?;
    let mut dropped: Vec<&(String, f64)> = levels.iter().filter(|(_, db)| *db < threshold_dbfs).collect();
    dropped.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(CurationReport {
        config: CurationConfig::silence(threshold_dbfs),
        kept_ids: levels
            .iter()
            .filter(|(_, db)| *db >= threshold_dbfs)
            .map(|(id, _)| id.clone())
            .collect(),
        dropped_ids: dropped.into_iter().map(|(id, _)| id.clone()).collect(),
        statistic: levels.iter().cloned().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(vars: &[f64]) -> Vec<(String, f64)> {
        vars.iter().enumerate().map(|(i, &v)| (format!("s{i:03}"), v)).collect()
    }

    #[test]
    fn variance_examples() {
        let c = Array2::from_elem((4, 4), -23.026);
        assert_eq!(sample_variance(&c).unwrap(), 0.0);
        let x = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(sample_variance(&x).unwrap(), 1.0);
        assert!(matches!(sample_variance(&Array2::zeros((0, 3))), Err(CurationError::EmptyFeature)));
    }

    #[test]
    fn drop_counts() {
        assert_eq!(drop_count(0.1, 200), 20);
        assert_eq!(drop_count(0.01, 100), 1);
        assert_eq!(drop_count(0.2, 1000), 200);
        assert_eq!(drop_count(0.05, 200), 10);
        assert_eq!(drop_count(1.0, 7), 7);
        assert_eq!(drop_count(0.0, 7), 0);
        assert_eq!(drop_count(0.015, 100), 1);
    }

    #[test]
    fn ratio_zero_is_identity() {
        let r = cull_low_variance(&recs(&[3.0, 1.0, 2.0]), 0.0).unwrap();
        assert!(r.dropped_ids.is_empty());
        assert_eq!(r.kept_ids, vec!["s000", "s001", "s002"]);
    }

    #[test]
    fn one_percent_of_hundred_drops_the_minimum() {
        let vars: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 + 0.5).collect();
        let r = cull_low_variance(&recs(&vars), 0.01).unwrap();
        let min_id = format!("s{:03}", vars.iter().position(|&v| v == 0.5).unwrap());
        assert_eq!(r.dropped_ids, vec![min_id]);
    }

    #[test]
    fn ties_break_by_id() {
        let input = vec![("b".to_string(), 1.0), ("a".to_string(), 1.0), ("c".to_string(), 0.0)];
        let r = cull_low_variance(&input, 0.5).unwrap();
        assert_eq!(r.dropped_ids, vec!["c"]);
        let r = cull_low_variance(&input, 0.7).unwrap();
        assert_eq!(r.dropped_ids, vec!["c", "a"]);
        assert_eq!(r.kept_ids, vec!["b"]);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(cull_low_variance(&recs(&[1.0]), 1.5), Err(CurationError::InvalidRatio(_))));
        let dup = vec![("a".to_string(), 1.0), ("a".to_string(), 2.0)];
        assert!(matches!(cull_low_variance(&dup, 0.5), Err(CurationError::DuplicateId(_))));
    }

    #[test]
    fn silence_examples() {
        let zeros = vec![0.0f32; 1000];
        let square: Vec<f32> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let quiet: Vec<f32> = (0..44100)
            .map(|n| (0.001 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 44100.0).sin()) as f32)
            .collect();
        assert!(rms_dbfs(&zeros) < -239.0);
        assert!(rms_dbfs(&square).abs() < 1e-9);
        let expected = 20.0 * (0.001 / 2f64.sqrt()).log10();
        assert!((rms_dbfs(&quiet) - expected).abs() < 1e-3);
        let r = cull_silence(
            &[("z".into(), &zeros[..]), ("sq".into(), &square[..]), ("q".into(), &quiet[..])],
            DEFAULT_SILENCE_DBFS,
        )
        .unwrap();
        assert_eq!(r.kept_ids, vec!["sq"]);
        assert_eq!(r.dropped_ids, vec!["z", "q"]);
    }

    #[test]
    fn tsv_round_trip() {
        let r = cull_low_variance(&recs(&[0.3, 0.1, 0.2, 7.5]), 0.5).unwrap();
        let back = CurationReport::parse_tsv(&r.to_tsv(), r.config).unwrap();
        assert_eq!(back, r);
    }
}
