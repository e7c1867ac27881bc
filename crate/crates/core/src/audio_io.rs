//! WAV (RIFF) PCM decoding into mono clips, and fixed-length segmentation.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("clip `{0}` has no samples")]
    EmptyClip(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("segment length {0} s is not positive or rounds to zero samples")]
    InvalidSegmentLength(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = AudioError> = std::result::Result<T, E>;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(AudioError::InvalidClip(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(AudioClip {
            samples,
            sample_rate_hz,
            source_id: source_id.into(),
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Pcm16,
    Pcm24,
}

impl BitDepth {
    pub fn bits(self) -> u16 {
        match self {
            BitDepth::Pcm16 => 16,
            BitDepth::Pcm24 => 24,
        }
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Format {
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn parse_fmt(chunk: &[u8]) -> Result<Format> {
    if chunk.len() < 16 {
        return Err(AudioError::MalformedHeader(format!("fmt chunk of {} bytes", chunk.len())));
    }
    let mut tag = u16_at(chunk, 0);
    let channels = u16_at(chunk, 2);
    let sample_rate = u32_at(chunk, 4);
    let block_align = u16_at(chunk, 12);
    let bits = u16_at(chunk, 14);
    if tag == FORMAT_EXTENSIBLE {
        if chunk.len() < 40 {
            return Err(AudioError::MalformedHeader("truncated WAVE_FORMAT_EXTENSIBLE".into()));
        }
        // First two bytes of the sub-format GUID carry the real format tag.
        tag = u16_at(chunk, 24);
    }
    match tag {
        FORMAT_PCM => {}
        FORMAT_FLOAT => return Err(AudioError::UnsupportedFormat("IEEE float samples".into())),
        other => return Err(AudioError::UnsupportedFormat(format!("format tag {other:#06x}"))),
    }
    if bits != 16 && bits != 24 {
        return Err(AudioError::UnsupportedFormat(format!("{bits}-bit PCM")));
    }
    if channels != 1 && channels != 2 {
        return Err(AudioError::UnsupportedFormat(format!("{channels} channels")));
    }
    if sample_rate == 0 {
        return Err(AudioError::MalformedHeader("zero sample rate".into()));
    }
    if block_align != channels * bits / 8 {
        return Err(AudioError::MalformedHeader(format!(
            "block align {block_align} inconsistent with {channels} x {bits}-bit"
        )));
    }
    Ok(Format {
        channels,
        sample_rate,
        bits,
    })
}

/// Decodes a RIFF/WAVE PCM16/PCM24 mono or stereo file.
///
/// Integer samples are scaled by `1 / 2^(bits-1)`; stereo is averaged to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing RIFF/WAVE signature".into()));
    }
    let riff_len = u32_at(bytes, 4) as usize;
    if riff_len + 8 > bytes.len() {
        return Err(AudioError::MalformedHeader(format!(
            "RIFF size {riff_len} exceeds file length {}",
            bytes.len()
        )));
    }
    let body = &bytes[..riff_len + 8];
    let mut pos = 12;
    let mut format = None;
    let mut data = None;
    while pos + 8 <= body.len() {
        let id = &body[pos..pos + 4];
        let size = u32_at(body, pos + 4) as usize;
        let start = pos + 8;
        if start + size > body.len() {
            return Err(AudioError::MalformedHeader(format!(
                "chunk `{}` of {size} bytes overruns the file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => format = Some(parse_fmt(&body[start..start + size])?),
            b"data" => {
                if format.is_none() {
                    return Err(AudioError::MalformedHeader("data chunk before fmt chunk".into()));
                }
                data = Some(&body[start..start + size]);
            }
            _ => {}
        }
        pos = start + size + (size & 1);
    }
    let format = format.ok_or_else(|| AudioError::MalformedHeader("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedHeader("no data chunk".into()))?;
    let width = (format.bits / 8) as usize;
    let frame = width * format.channels as usize;
    if data.len() % frame != 0 {
        return Err(AudioError::MalformedHeader(format!(
            "data size {} is not a multiple of the {frame}-byte frame",
            data.len()
        )));
    }
    let scale = 1.0 / (1u32 << (format.bits - 1)) as f64;
    let read = |s: &[u8]| -> f64 {
        let v = match width {
            2 => i16::from_le_bytes([s[0], s[1]]) as i32,
            _ => (i32::from_le_bytes([0, s[0], s[1], s[2]])) >> 8,
        };
        v as f64 * scale
    };
    let samples = data
        .chunks_exact(frame)
        .map(|f| {
            let sum: f64 = f.chunks_exact(width).map(read).sum();
            (sum / format.channels as f64) as f32
        })
        .collect();
    AudioClip::new(samples, format.sample_rate, "")
}

/// Reads and decodes a WAV file; the clip's id is `source_id`.
pub fn read_wav(path: &Path, source_id: &str) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut clip = decode_wav(&bytes)?;
    clip.source_id = source_id.to_string();
    Ok(clip)
}

fn quantize(v: f32, bits: u16) -> i32 {
    let full = (1i64 << (bits - 1)) as f64;
    let q = (v as f64 * full).round();
    q.clamp(-full, full - 1.0) as i32
}

/// Encodes interleaved PCM from per-channel sample slices of equal length.
pub fn encode_wav_channels(channels: &[&[f32]], sample_rate_hz: u32, depth: BitDepth) -> Vec<u8> {
    assert!(!channels.is_empty() && channels.iter().all(|c| c.len() == channels[0].len()));
    let bits = depth.bits();
    let width = (bits / 8) as usize;
    let n_ch = channels.len() as u16;
    let data_len = channels[0].len() * width * channels.len();
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&n_ch.to_le_bytes());
    out.extend_from_slice(&sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(sample_rate_hz * (n_ch as u32) * width as u32).to_le_bytes());
    out.extend_from_slice(&(n_ch * width as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..channels[0].len() {
        for ch in channels {
            let q = quantize(ch[i], bits);
            out.extend_from_slice(&q.to_le_bytes()[..width]);
        }
    }
    if data_len % 2 == 1 {
        out.push(0);
    }
    out
}

pub fn encode_wav(clip: &AudioClip, depth: BitDepth) -> Vec<u8> {
    encode_wav_channels(&[&clip.samples], clip.sample_rate_hz, depth)
}

/// Cuts consecutive non-overlapping windows of `round(segment_s * rate)`
/// samples; a trailing remainder shorter than one window is discarded.
/// Child ids are `<parent id>#<index>`.
pub fn segment_clip(clip: &AudioClip, segment_s: f64) -> Result<Vec<AudioClip>> {
    if clip.samples.is_empty() {
        return Err(AudioError::EmptyClip(clip.source_id.clone()));
    }
    let len = (segment_s * clip.sample_rate_hz as f64).round();
    if !(segment_s > 0.0) || len < 1.0 {
        return Err(AudioError::InvalidSegmentLength(segment_s));
    }
    let len = len as usize;
    let segments: Vec<AudioClip> = clip
        .samples
        .chunks_exact(len)
        .enumerate()
        .map(|(i, s)| AudioClip {
            samples: s.to_vec(),
            sample_rate_hz: clip.sample_rate_hz,
            source_id: segment_id(&clip.source_id, i),
        })
        .collect();
    if segments.is_empty() {
        log::warn!(
            "EmptySegmentation: `{}` ({:.2} s) is shorter than one {segment_s} s segment",
            clip.source_id,
            clip.duration_s()
        );
    }
    Ok(segments)
}

pub fn segment_id(parent: &str, index: usize) -> String {
    format!("{parent}#{index}")
}

/// File part of a segment id produced by [`segment_clip`].
pub fn parent_of_segment(segment_id: &str) -> &str {
    segment_id.rsplit_once('#').map_or(segment_id, |(p, _)| p)
}
