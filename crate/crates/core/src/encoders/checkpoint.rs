//! Checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "EVPACKPT"
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON
//! count      u32
//! count times:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, rank x u64 dims
//!   values   product(dims) x f64
//! ```

use std::path::Path;

use serde_json::Value;

use crate::error::{DataError, Result};
use crate::numcore::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVPACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            arrays: Vec::new(),
        }
    }

    /// Appends every parameter of `store` in registration order.
    pub fn push_store<S: Real>(&mut self, store: &ParamStore<S>) {
        for (_, e) in store.entries() {
            self.push(&e.name, &e.value);
        }
    }

    pub fn push<S: Real>(&mut self, name: &str, t: &Tensor<S>) {
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Copies every array whose name matches a parameter of `store`; returns the
    /// number of parameters restored.
    pub fn restore<S: Real>(&self, store: &mut ParamStore<S>) -> Result<usize> {
        let mut n = 0;
        for a in &self.arrays {
            if let Some(id) = store.id(&a.name) {
                let t = Tensor::new(a.shape.clone(), a.data.iter().map(|&v| S::of(v)).collect())?;
                if t.shape() != store.value(id).shape() {
                    return Err(DataError::Malformed(format!(
                        "checkpoint array `{}` has shape {:?}, model expects {:?}",
                        a.name,
                        t.shape(),
                        store.value(id).shape()
                    ))
                    .into());
                }
                *store.value_mut(id) = t;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(DataError::Malformed("not a checkpoint (bad magic)".into()).into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DataError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            }
            .into());
        }
        let hlen = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| DataError::Malformed(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| DataError::Malformed("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(DataError::Malformed("trailing bytes after checkpoint".into()).into());
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(DataError::Truncated(format!(
                "checkpoint needs {n} more bytes at offset {}",
                self.at
            ))
            .into());
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
