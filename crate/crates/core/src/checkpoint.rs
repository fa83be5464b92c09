//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"XNM1"
//! version    u32                    (currently 1)
//! count      u32                    number of tensors
//! tensor*    name_len u16, name utf-8 bytes,
//!            rank u8, dims u32 each,
//!            data f32 raw little-endian (product-of-dims entries)
//! checksum   u64                    FNV-1a 64 over all preceding bytes
//! ```
//!
//! Model parameters and batch-norm running statistics are stored under
//! their parameter-store names; optimizer state is namespaced `opt/`,
//! trainer bookkeeping `meta/`. Values are f32, so round trips through a
//! checkpoint are bit-exact for f32 stores.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"XNM1";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

struct HashingWriter<W: Write> {
    inner: W,
    hash: u64,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hash: FNV_OFFSET,
        }
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.hash = fnv1a(self.hash, bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }
}

#[derive(Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn scalar(&self, name: &str) -> Option<f32> {
        self.get(name).map(|t| t.data()[0])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Snapshot every store entry (parameters and running statistics).
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        let mut ckpt = Checkpoint::new();
        for (_, p) in store.iter() {
            ckpt.push(p.name.clone(), p.value.clone())
                .expect("store names are unique");
        }
        ckpt
    }

    /// Restore every store entry, bit-exact. Every parameter must be present
    /// with a matching shape; extra tensors (optimizer state, metadata) are
    /// left for the caller to pick out.
    pub fn apply_to_store(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let (name, shape) = {
                let p = store.get(id);
                (p.name.clone(), p.value.shape().clone())
            };
            let t = self.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} missing from checkpoint"))
            })?;
            if t.shape() != &shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {} but the current configuration expects {shape}",
                    t.shape()
                )));
            }
            store.get_mut(id).value = t.clone();
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = HashingWriter::new(BufWriter::new(file));
        w.put(&MAGIC)?;
        w.put(&VERSION.to_le_bytes())?;
        w.put(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
            }
            w.put(&(name_bytes.len() as u16).to_le_bytes())?;
            w.put(name_bytes)?;
            let dims = tensor.shape().dims();
            w.put(&[dims.len() as u8])?;
            for &d in dims {
                w.put(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.put(&v.to_le_bytes())?;
            }
        }
        let checksum = w.hash;
        w.inner.write_all(&checksum.to_le_bytes())?;
        w.inner.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < MAGIC.len() + 4 + 4 + 8 {
            return Err(Error::Checkpoint("corrupt checkpoint: file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a(FNV_OFFSET, body) != stored {
            return Err(Error::Checkpoint("corrupt checkpoint: checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("corrupt checkpoint: bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} unsupported (expected {VERSION})"
            )));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("corrupt checkpoint: invalid tensor name".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            if dims.iter().any(|&d| d == 0) {
                return Err(Error::Checkpoint(format!(
                    "corrupt checkpoint: zero extent in tensor {name}"
                )));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let shape = if rank == 0 { Shape::scalar() } else { Shape::new(dims) };
            ckpt.push(name, Tensor::new(shape, data).unwrap())?;
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("corrupt checkpoint: trailing bytes".into()));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("corrupt checkpoint: truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
