//! Binary checkpoint container: a 4-byte magic, a format version, a string
//! metadata map, and named f32 tensors (little-endian). The byte layout is
//! fully determined by insertion order, so writing the same state twice
//! produces identical files.

use crate::graph::Params;
use crate::NnError;
use indexmap::IndexMap;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub meta: IndexMap<String, String>,
    pub blobs: IndexMap<String, Blob>,
}

impl Container {
    pub fn new(magic: [u8; 4], version: u32) -> Self {
        Container { magic, version, meta: IndexMap::new(), blobs: IndexMap::new() }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, NnError> {
        self.meta(key)
            .ok_or_else(|| NnError::BadContainer(format!("missing meta key {key}")))
    }

    pub fn insert_blob(&mut self, name: &str, dims: Vec<usize>, data: Vec<f32>) {
        let n: usize = dims.iter().product();
        assert_eq!(n, data.len(), "blob {name}: dims {dims:?} vs {} values", data.len());
        self.blobs.insert(name.to_string(), Blob { dims, data });
    }

    /// Store every parameter as a blob under its own name.
    pub fn insert_params(&mut self, params: &Params<f32>) {
        for (name, value) in params.iter() {
            let dims = value.shape().to_vec();
            let data: Vec<f32> = value.iter().cloned().collect();
            self.insert_blob(name, dims, data);
        }
    }

    /// Rebuild a parameter store from blobs with the given name prefix
    /// (empty prefix takes everything).
    pub fn extract_params(&self, prefix: &str) -> Params<f32> {
        let mut p = Params::new();
        for (name, blob) in self.blobs.iter() {
            if name.starts_with(prefix) {
                let arr = ndarray::ArrayD::from_shape_vec(
                    ndarray::IxDyn(&blob.dims),
                    blob.data.clone(),
                )
                .expect("blob dims consistent with data");
                p.insert(name, arr);
            }
        }
        p
    }

    pub fn expect_magic(&self, magic: &[u8; 4]) -> Result<(), NnError> {
        if &self.magic != magic {
            return Err(NnError::BadContainer(format!(
                "magic mismatch: wanted {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&self.magic)
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in self.meta.iter() {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, blob) in self.blobs.iter() {
            write_str(&mut out, name);
            out.extend_from_slice(&(blob.dims.len() as u32).to_le_bytes());
            for &d in &blob.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &blob.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), NnError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur
            .take(4)?
            .try_into()
            .expect("4 bytes requested");
        let version = cur.u32()?;
        let meta_count = cur.u32()?;
        let mut meta = IndexMap::new();
        for _ in 0..meta_count {
            let k = cur.string()?;
            let v = cur.string()?;
            meta.insert(k, v);
        }
        let blob_count = cur.u32()?;
        let mut blobs = IndexMap::new();
        for _ in 0..blob_count {
            let name = cur.string()?;
            let ndim = cur.u32()? as usize;
            if ndim > 8 {
                return Err(NnError::BadContainer(format!("blob {name}: ndim {ndim} too large")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = cur.take(n * 4)?;
            let mut data = Vec::with_capacity(n);
            for chunk in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
            }
            blobs.insert(name, Blob { dims, data });
        }
        if cur.pos != bytes.len() {
            return Err(NnError::BadContainer(format!(
                "{} trailing bytes after last blob",
                bytes.len() - cur.pos
            )));
        }
        Ok(Container { magic, version, meta, blobs })
    }

    pub fn read(path: &Path) -> Result<Self, NnError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            NnError::BadContainer(msg) => {
                NnError::BadContainer(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::BadContainer(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, NnError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(NnError::BadContainer(format!("string length {len} too large")));
        }
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| NnError::BadContainer("non-utf8 string".into()))
    }
}

/// Hex sha256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hex sha256 of a file's contents.
pub fn sha256_hex_file(path: &Path) -> Result<String, NnError> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    Ok(s)
}
