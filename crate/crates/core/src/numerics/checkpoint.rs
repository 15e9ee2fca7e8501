//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DDI1" | version | flags | meta_len | meta (UTF-8) | count
//! then `count` times: name_len | name (UTF-8) | rank | dims[rank] | f32 payload
//! ```
//!
//! Flag bit 0 marks that momentum buffers follow their parameters as
//! entries named `<param>@momentum`. `meta` carries the architecture
//! description so a network can be rebuilt from the file alone.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DDI1";
pub const FORMAT_VERSION: u32 = 1;
pub const FLAG_MOMENTUM: u32 = 1;
const MOMENTUM_SUFFIX: &str = "@momentum";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
    pub has_momentum: bool,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: impl Into<String>, with_momentum: bool) -> Self {
        let mut tensors = Vec::new();
        for (_, p) in store.iter() {
            tensors.push((p.name.clone(), p.value.clone()));
            if with_momentum {
                tensors.push((format!("{}{}", p.name, MOMENTUM_SUFFIX), p.momentum.clone()));
            }
        }
        Checkpoint { meta: meta.into(), tensors, has_momentum: with_momentum }
    }

    /// Copies every parameter (and momentum, when present) into `store`.
    /// Every store entry must be present with a matching shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", name)))?;
            store.set_value(id, (*t).clone())?;
            if self.has_momentum {
                if let Some(m) = lookup.get(format!("{}{}", name, MOMENTUM_SUFFIX).as_str()) {
                    if m.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("momentum shape mismatch for `{}`", name)));
                    }
                    store.get_mut(id).momentum = (*m).clone();
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, FORMAT_VERSION)?;
        put_u32(&mut w, if self.has_momentum { FLAG_MOMENTUM } else { 0 })?;
        put_u32(&mut w, len_u32(self.meta.len())?)?;
        w.write_all(self.meta.as_bytes())?;
        put_u32(&mut w, len_u32(self.tensors.len())?)?;
        for (name, t) in &self.tensors {
            put_u32(&mut w, len_u32(name.len())?)?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, len_u32(t.rank())?)?;
            for &d in t.shape() {
                put_u32(&mut w, len_u32(d)?)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", magic)));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", version)));
        }
        let flags = get_u32(&mut r)?;
        let meta = get_string(&mut r)?;
        let count = get_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = get_string(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| get_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        Ok(Checkpoint { meta, tensors, has_momentum: flags & FLAG_MOMENTUM != 0 })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn len_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {} exceeds u32", v)))
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_string<R: Read>(r: &mut R) -> Result<String> {
    let len = get_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
}
