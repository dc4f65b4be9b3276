//! Binary checkpoint format.
//!
//! ```text
//! magic        6 bytes   "NUCV1\0"
//! count        u32 LE
//! per entry:
//!   name_len   u32 LE
//!   name       name_len bytes, UTF-8
//!   dtype      u8        (0 = f32)
//!   rank       u32 LE
//!   extents    rank × u32 LE
//! payloads     for each entry in manifest order, little-endian f32
//! crc          u32 LE    CRC-32 (IEEE) of the payload bytes
//! ```
//!
//! Every [`ParamStore`] entry is written, running batch-norm statistics
//! included, so a reloaded model reproduces eval-mode outputs exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 6] = b"NUCV1\0";
pub const DTYPE_F32: u8 = 0;

/// One decoded tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    let payload_start = out.len();
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype code {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let payload_start = r.pos;
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    let payload = &bytes[payload_start..r.pos];
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    Ok(entries)
}

/// Copies decoded tensors into `store`; names and shapes must match exactly.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, entries: &[CheckpointEntry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .id_of(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", e.name)))?;
        let slot = store.get_mut(id);
        if slot.value.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} != model shape {:?}",
                e.name,
                e.shape,
                slot.value.shape()
            )));
        }
        slot.value = Tensor::new(
            e.shape.clone(),
            e.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )?;
    }
    store.mark_bn_fitted();
    Ok(())
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(&model.store)).map_err(|e| Error::io(path, e))
}

/// Loads weights into a model already built from the matching spec.
pub fn load_into<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(&bytes)?;
    restore(&mut model.store, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn small_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", ParamKind::Weight, Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap())
            .unwrap();
        s.add("a.bias", ParamKind::Bias, Tensor::new(vec![2], vec![0.5, 0.75]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = encode(&small_store());
        assert_eq!(&bytes[..6], b"NUCV1\0");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        // first entry: name length 8, "a.weight", dtype 0, rank 2, extents 2, 3
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 8);
        assert_eq!(&bytes[14..22], b"a.weight");
        assert_eq!(bytes[22], 0);
        assert_eq!(u32::from_le_bytes(bytes[23..27].try_into().unwrap()), 2);
        let manifest_len = 10 + (4 + 8 + 1 + 4 + 8) + (4 + 6 + 1 + 4 + 4);
        let payload = &bytes[manifest_len..bytes.len() - 4];
        assert_eq!(payload.len(), 8 * 4);
        assert_eq!(f32::from_le_bytes(payload[4..8].try_into().unwrap()), -2.0);
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(payload));
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let mut bytes = encode(&small_store());
        let i = bytes.len() - 6;
        bytes[i] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("CRC")));
    }

    #[test]
    fn truncation_and_magic_are_checked() {
        let bytes = encode(&small_store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let entries = decode(&encode(&small_store())).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("a.weight", ParamKind::Weight, Tensor::zeros(vec![3, 2])).unwrap();
        other.add("a.bias", ParamKind::Bias, Tensor::zeros(vec![2])).unwrap();
        assert!(restore(&mut other, &entries).is_err());
    }
}
