//! Versioned named-array checkpoints.
//!
//! Layout (little-endian): magic `UMCNPCKP`, version `u32`, kind (`u32`
//! length + UTF-8), metadata JSON (`u32` length + UTF-8), array count `u32`,
//! then per array: name (`u16` length + UTF-8), rank `u8`, dims `u64` each,
//! data `f64` each. Readers look arrays up by name, so new arrays can be
//! appended without breaking old readers.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::autodiff::Array;

const MAGIC: &[u8; 8] = b"UMCNPCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("expected a {expected} checkpoint, found {found}")]
    Kind { expected: String, found: String },
    #[error("checkpoint has no array named {0}")]
    Missing(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Kind tag, JSON metadata and named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(kind: &str, metadata: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            metadata,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.insert(name.into(), array);
    }

    /// Inserts `arrays` as `prefix.0`, `prefix.1`, ...
    pub fn insert_list(&mut self, prefix: &str, arrays: &[Array]) {
        for (i, a) in arrays.iter().enumerate() {
            self.insert(format!("{prefix}.{i}"), a.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array, CheckpointError> {
        self.arrays.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// `prefix.0 .. prefix.{n-1}`.
    pub fn get_list(&self, prefix: &str, n: usize) -> Result<Vec<Array>, CheckpointError> {
        (0..n).map(|i| self.get(&format!("{prefix}.{i}")).cloned()).collect()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_str32(w, &self.kind)?;
        write_str32(w, &serde_json::to_string(&self.metadata)?)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, a) in &self.arrays {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[a.shape().len() as u8])?;
            for d in a.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(a.len() * 8);
            for v in a.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(read_n::<4>(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = read_str32(r)?;
        let metadata = serde_json::from_str(&read_str32(r)?)?;
        let count = u32::from_le_bytes(read_n::<4>(r)?);
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_n::<2>(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Format(e.to_string()))?;
            let rank = read_n::<1>(r)?[0] as usize;
            let shape = (0..rank)
                .map(|_| read_n::<8>(r).map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let a = Array::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            arrays.insert(name, a);
        }
        Ok(Checkpoint { kind, metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(&mut io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_str32(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str32(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = u32::from_le_bytes(read_n::<4>(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Format(e.to_string()))
}

fn read_n<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint::new("test", serde_json::json!({"a": 1}));
        c.insert("w", Array::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]));
        c.insert_list("layer", &[Array::scalar(7.0), Array::row(&[1.0, 2.0])]);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_list("layer", 2).unwrap()[1], Array::row(&[1.0, 2.0]));
        assert!(matches!(back.get("nope"), Err(CheckpointError::Missing(_))));
        assert!(back.expect_kind("other").is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Checkpoint::read_from(&mut &b"NOTACKPTxxxx"[..]),
            Err(CheckpointError::BadMagic)
        ));
    }
}
