//! "ASCP" parameter checkpoints: magic, version u32, count u32, then per
//! parameter name (u16 length + UTF-8), ndim u8, dims u32 each and
//! float32 data, all little-endian.

use crate::error::{AutogradError, Result};
use crate::param::Parameter;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"ASCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl From<&Parameter<f32>> for CheckpointEntry {
    fn from(p: &Parameter<f32>) -> Self {
        CheckpointEntry {
            name: p.name.clone(),
            shape: p.shape().to_vec(),
            data: p.data().to_vec(),
        }
    }
}

fn bad(msg: impl Into<String>) -> AutogradError {
    AutogradError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[CheckpointEntry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {}", e.name)))?;
        let ndim = u8::try_from(e.shape.len()).map_err(|_| bad("too many dimensions"))?;
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(bad(format!("`{}` data does not match shape", e.name)));
        }
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[ndim])?;
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| bad("truncated checkpoint"))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointEntry>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let ndim = read_array::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| bad(format!("truncated data for `{name}`")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"ASCX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let entries = vec![CheckpointEntry { name: "w".into(), shape: vec![2], data: vec![1.0, 2.0] }];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), entries);
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}
