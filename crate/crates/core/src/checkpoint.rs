//! Self-describing binary container for tensors plus a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "IFMCKPT1"
//! u64     header length, then that many bytes of UTF-8 JSON
//! u64     entry count
//! entry:  u32 path length, path bytes (UTF-8)
//!         u8  dtype length, dtype bytes ("f64")
//!         u32 rank, rank × u64 dims
//!         product(dims) × 8 bytes of little-endian f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{at_path, Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"IFMCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (path, m) in &self.tensors {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(3);
            out.extend_from_slice(b"f64");
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hlen = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?)?;
        let n = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let plen = r.u32()? as usize;
            let path = String::from_utf8(r.take(plen)?.to_vec())
                .map_err(|_| Error::Checkpoint("path is not UTF-8".into()))?;
            let dlen = r.take(1)?[0] as usize;
            let dtype = r.take(dlen)?;
            if dtype != b"f64" {
                return Err(Error::Checkpoint(format!(
                    "`{path}`: unsupported dtype {}",
                    String::from_utf8_lossy(dtype)
                )));
            }
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(Error::Checkpoint(format!("`{path}`: rank {rank} not supported"))),
            };
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(path.clone(), Matrix::from_vec(rows, cols, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry `{path}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path).map_err(at_path(path))?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).map_err(at_path(path))?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
