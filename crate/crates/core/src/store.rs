//! On-disk feature store: `manifest.tsv` plus one ASCF binary per record.

use crate::dsp::{FeatureKind, FeatureRecord};
use ndarray::Array2;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ASCF_MAGIC: &[u8; 4] = b"ASCF";
pub const ASCF_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.tsv";
const HEADER: &str = "segment_id\tlabel\tkind\trows\tcols\trelative_path\tsample_variance";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not an ASCF file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported ASCF version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed feature file: {0}")]
    Malformed(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("segment id {0:?} contains a tab or newline")]
    BadId(String),
    #[error("no {kind} record for segment {id}")]
    Missing { id: String, kind: FeatureKind },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_ascf(data: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let mut out = Vec::with_capacity(16 + 4 * rows * cols);
    out.extend_from_slice(ASCF_MAGIC);
    out.extend_from_slice(&ASCF_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_ascf(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 16 {
        return Err(StoreError::Malformed(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != ASCF_MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != ASCF_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::Malformed(format!("{rows}x{cols} overflows")))?;
    if body.len() != expected {
        return Err(StoreError::Malformed(format!(
            "{rows}x{cols} needs {expected} data bytes, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("size checked"))
}

/// 8-bit binary PGM, min-max scaled, row 0 at the bottom so low frequencies
/// sit low in the picture.
pub fn encode_pgm(data: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        for c in 0..cols {
            out.push((((data[[r, c]] - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub segment_id: String,
    pub label: Option<usize>,
    pub kind: FeatureKind,
    pub rows: usize,
    pub cols: usize,
    pub relative_path: String,
    pub sample_variance: Option<f64>,
}

fn opt(s: &str) -> Option<&str> {
    (s != "-").then_some(s)
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.segment_id,
            self.label.map_or("-".into(), |l| l.to_string()),
            self.kind,
            self.rows,
            self.cols,
            self.relative_path,
            self.sample_variance.map_or("-".into(), |v| v.to_string()),
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |msg: String| StoreError::Manifest { line: lineno, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 columns, found {}", f.len())));
        }
        Ok(ManifestEntry {
            segment_id: f[0].to_string(),
            label: opt(f[1])
                .map(|s| s.parse().map_err(|_| bad(format!("bad label `{s}`"))))
                .transpose()?,
            kind: f[2].parse().map_err(bad)?,
            rows: f[3].parse().map_err(|_| bad(format!("bad rows `{}`", f[3])))?,
            cols: f[4].parse().map_err(|_| bad(format!("bad cols `{}`", f[4])))?,
            relative_path: f[5].to_string(),
            sample_variance: opt(f[6])
                .map(|s| s.parse().map_err(|_| bad(format!("bad variance `{s}`"))))
                .transpose()?,
        })
    }
}

pub struct FeatureStore {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl FeatureStore {
    /// Opens `dir`, creating it (with an empty manifest) if needed.
    pub fn open_or_create(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        if root.join(MANIFEST).exists() {
            return Self::open(root);
        }
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(FeatureStore { root, entries: Vec::new() })
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => {
                return Err(StoreError::Manifest {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        }
        let entries = lines
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| ManifestEntry::parse(l, i + 1))
            .collect::<Result<_>>()?;
        Ok(FeatureStore { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn entries_of(&self, kind: FeatureKind) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    pub fn find(&self, id: &str, kind: FeatureKind) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.kind == kind && e.segment_id == id)
    }

    /// Writes the record's data file and adds or replaces its manifest entry.
    /// Call [`FeatureStore::save`] to persist the manifest.
    pub fn put(&mut self, record: &FeatureRecord) -> Result<&ManifestEntry> {
        let id = &record.segment_id;
        if id.contains(['\t', '\n', '\r']) {
            return Err(StoreError::BadId(id.clone()));
        }
        let slot = self
            .entries
            .iter()
            .position(|e| e.kind == record.kind && &e.segment_id == id);
        let relative_path = match slot {
            Some(i) => self.entries[i].relative_path.clone(),
            None => format!("{}/{:06}.ascf", record.kind, self.entries_of(record.kind).count()),
        };
        let path = self.root.join(&relative_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, encode_ascf(&record.data)).map_err(io_err(&path))?;
        let entry = ManifestEntry {
            segment_id: id.clone(),
            label: record.label,
            kind: record.kind,
            rows: record.data.nrows(),
            cols: record.data.ncols(),
            relative_path,
            sample_variance: record.sample_variance,
        };
        let i = match slot {
            Some(i) => {
                self.entries[i] = entry;
                i
            }
            None => {
                self.entries.push(entry);
                self.entries.len() - 1
            }
        };
        Ok(&self.entries[i])
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<FeatureRecord> {
        let path = self.root.join(&entry.relative_path);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(&path))?;
        let data = decode_ascf(&bytes)?;
        if data.dim() != (entry.rows, entry.cols) {
            return Err(StoreError::Malformed(format!(
                "{} is {:?}, manifest says {}x{}",
                entry.relative_path,
                data.dim(),
                entry.rows,
                entry.cols
            )));
        }
        let mut rec = FeatureRecord::new(entry.segment_id.clone(), entry.label, entry.kind, data);
        rec.sample_variance = entry.sample_variance;
        Ok(rec)
    }

    pub fn load_id(&self, id: &str, kind: FeatureKind) -> Result<FeatureRecord> {
        let entry = self.find(id, kind).ok_or_else(|| StoreError::Missing {
            id: id.to_string(),
            kind,
        })?;
        self.load(entry)
    }

    pub fn dump_image(&self, entry: &ManifestEntry, dir: &Path) -> Result<PathBuf> {
        let rec = self.load(entry)?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let name: String = entry
            .segment_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        let path = dir.join(format!("{name}.pgm"));
        fs::write(&path, encode_pgm(&rec.data)).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{HEADER}").map_err(io_err(&path))?;
        for e in &self.entries {
            writeln!(w, "{}", e.to_line()).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))
    }
}
