//! Binary named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CHKRLCKP"
//! version    u32
//! config_len u64, config text (UTF-8)
//! config_sha 32 bytes, SHA-256 of the config text
//! n_tensors  u64
//! n_tensors x { name_len u32, name, rows u64, cols u64 }
//! payload    f64 x sum(rows*cols), tensors in header order
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CHKRLCKP";
pub const TENSOR_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn config_hash(config: &str) -> [u8; 32] {
    Sha256::digest(config.as_bytes()).into()
}

impl TensorFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&TENSOR_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&config_hash(&self.config));
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != TENSOR_FILE_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {TENSOR_FILE_VERSION})"
            )));
        }
        let clen = r.u64()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let stored = r.take(32)?;
        if stored != config_hash(&config) {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let n = r.u64()? as usize;
        let mut headers = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            headers.push((name, rows, cols));
        }
        let mut tensors = Vec::with_capacity(headers.len());
        for (name, rows, cols) in headers {
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' too large")))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
