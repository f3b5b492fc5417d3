//! Binary tensor serialization and the named-tensor checkpoint container.
//!
//! Tensor format ("CFTN"): magic bytes, u16 version, u8 rank, extents as
//! little-endian u32, payload as little-endian 64-bit floats. Checkpoints
//! prepend a length-prefixed UTF-8 JSON metadata block and store a sequence
//! of named CFTN tensors.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;

use super::{Tensor, TensorError, MAX_RANK};

pub const TENSOR_MAGIC: &[u8; 4] = b"CFTN";
pub const TENSOR_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("unsupported format version {got}")]
    BadVersion { got: u16 },
    #[error("declared rank {rank} is outside 1..={MAX_RANK}")]
    BadRank { rank: u8 },
    #[error("invalid tensor payload: {0}")]
    Tensor(#[from] TensorError),
    #[error("metadata block is not valid JSON: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?} in checkpoint")]
    DuplicateName(String),
    #[error("checkpoint has no tensor named {0:?}")]
    MissingTensor(String),
    #[error("payload value at index {index} is not finite")]
    NonFinite { index: usize },
}

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, tensor: &Tensor<S>) -> Result<(), FormatError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[tensor.rank() as u8])?;
    for &extent in tensor.shape() {
        w.write_all(&(extent as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(FormatError::BadMagic {
            expected: *TENSOR_MAGIC,
            got: magic,
        });
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != TENSOR_VERSION {
        return Err(FormatError::BadVersion { got: version });
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let rank = rank[0];
    if rank == 0 || rank as usize > MAX_RANK {
        return Err(FormatError::BadRank { rank });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut extent = [0u8; 4];
        r.read_exact(&mut extent)?;
        shape.push(u32::from_le_bytes(extent) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for index in 0..numel {
        r.read_exact(&mut buf)?;
        let v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(FormatError::NonFinite { index });
        }
        data.push(S::from_f64_lossy(v));
    }
    Ok(Tensor::new(&shape, data)?)
}

/// Named tensors plus a JSON metadata header.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub meta: serde_json::Value,
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) -> Result<(), FormatError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(FormatError::DuplicateName(name.to_string()));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, FormatError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            write_tensor(w, tensor)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: *CHECKPOINT_MAGIC,
                got: magic,
            });
        }
        let mut version = [0u8; 2];
        r.read_exact(&mut version)?;
        let version = u16::from_le_bytes(version);
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::BadVersion { got: version });
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut meta_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut meta_bytes)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;
        r.read_exact(&mut len)?;
        let count = u32::from_le_bytes(len) as usize;
        let mut checkpoint = Self::new(meta);
        for _ in 0..count {
            let mut name_len = [0u8; 2];
            r.read_exact(&mut name_len)?;
            let mut name = vec![0u8; u16::from_le_bytes(name_len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| FormatError::BadName)?;
            let tensor = read_tensor(r)?;
            checkpoint.insert(&name, tensor)?;
        }
        Ok(checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn tensor_round_trip_is_exact() {
        let t = Tensor::<f64>::from_f64_slice(&[2, 3], &[1.0, -0.5, 3.25, 1e-300, 7.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], TENSOR_MAGIC);
        let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_header_layout_is_pinned() {
        let t = Tensor::<f64>::from_f64_slice(&[1, 2], &[1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        // magic "CFTN", version 1 LE, rank 2, extents 1 and 2 as u32 LE.
        assert_eq!(&buf[..7], &[b'C', b'F', b'T', b'N', 1, 0, 2]);
        assert_eq!(&buf[7..15], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[15..23], &1.0f64.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x01\x01\x00\x00\x00";
        assert!(matches!(
            read_tensor::<f64, _>(&mut buf.as_slice()),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let t = Tensor::<f64>::from_f64_slice(&[1], &[1.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let payload_at = buf.len() - 8;
        buf[payload_at..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            read_tensor::<f64, _>(&mut buf.as_slice()),
            Err(FormatError::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_meta_and_order() {
        let mut ck = Checkpoint::new(json!({"seed": 7, "kind": "test"}));
        ck.insert("b", Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap())
            .unwrap();
        ck.insert("a", Tensor::from_f64_slice(&[1], &[3.0]).unwrap())
            .unwrap();
        assert!(ck
            .insert("a", Tensor::<f64>::zeros(&[1]).unwrap())
            .is_err());
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::<f64>::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta["seed"], json!(7));
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(back.get("a").unwrap().data(), &[3.0]);
        assert!(back.get("missing").is_err());
    }
}
