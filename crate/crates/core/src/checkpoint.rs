//! Versioned parameter checkpoints.
//!
//! Layout, little-endian: magic `MMCK`, u32 version, u32 header length and
//! UTF-8 `key=value` header text, u32 tensor count, then per tensor a u16
//! name length, name bytes, u8 rank, u32 extents and f64 values. A CRC32 of
//! everything before it closes the file.

use std::path::Path;

use memstream_tensor::Tensor;

use crate::binio::{verify_crc, Reader};
use crate::error::{contract, Error, IoContext, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(header: impl Into<String>) -> Self {
        Self {
            header: header.into(),
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter of `store`, names prefixed with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.tensors.push((format!("{prefix}{}", p.name), p.value.clone()));
        }
    }

    /// Copies the tensors under `prefix` into `store`; every parameter of
    /// `store` must be present with a matching shape.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore, path: &Path) -> Result<()> {
        let mut loaded = ParamStore::new(0);
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                loaded.insert(rest, t.clone(), false);
            }
        }
        let n = store.load_from(&loaded)?;
        if n != store.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("checkpoint holds {n} of {} parameters under {prefix:?}", store.len()),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        b.extend_from_slice(self.header.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return contract(format!("tensor {name} cannot be stored"));
            }
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.rank() as u8);
            for &e in t.shape() {
                b.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format {
                path: path.to_string(),
                msg: "bad magic, not a checkpoint".into(),
            });
        }
        let payload = verify_crc(bytes, path)?;
        let mut r = Reader { buf: payload, pos: 4, path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| r.err("header is not UTF-8"))?
            .to_string();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| r.err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n * 8 > payload.len() - r.pos {
                return Err(r.err(format!("tensor {name} extends past the end of the file")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != payload.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).io_ctx(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, self.to_bytes()?).io_ctx(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).io_ctx(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
