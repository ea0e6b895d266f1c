//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IQRL" | version: u32 | scalar width in bytes: u32
//! meta length: u32 | meta: UTF-8 JSON
//! record count: u32
//! repeated: name length: u32 | name | ndim: u32 | dims: u32 × ndim | raw data
//! ```
//!
//! Raw data is the tensor's own scalar type (float32 for training runs,
//! float64 for test-mode runs), so save/load is bit-exact either way.

use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::nn::param::ParamStore;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"IQRL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Checkpoint<T> {
    fn default() -> Self {
        Self {
            meta: json!({}),
            tensors: Vec::new(),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads just the header and returns `(version, scalar width)`.
pub fn peek_header(path: &Path) -> Result<(u32, u32)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an IQRL checkpoint".into()));
    }
    Ok((r.u32("version")?, r.u32("scalar width")?))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    }

    /// Values, Adam moments and step counters of every parameter.
    pub fn put_store(&mut self, store: &ParamStore<T>) {
        let tag = store.tag().to_string();
        let mut steps = Vec::with_capacity(store.len());
        for p in store.iter() {
            self.push(format!("{tag}/{}", p.name), p.value.clone());
            self.push(format!("{tag}/{}#m", p.name), p.m.clone());
            self.push(format!("{tag}/{}#v", p.name), p.v.clone());
            steps.push(p.step);
        }
        if !self.meta.is_object() {
            self.meta = json!({});
        }
        let obj = self.meta.as_object_mut().unwrap();
        let entry = obj.entry("adam_steps").or_insert_with(|| json!({}));
        entry[tag] = json!(steps);
    }

    /// Overwrites `store` from the records written by [`Self::put_store`].
    pub fn restore_store(&self, store: &mut ParamStore<T>) -> Result<()> {
        let tag = store.tag().to_string();
        let steps: Vec<u64> = serde_json::from_value(
            self.meta
                .get("adam_steps")
                .and_then(|s| s.get(&tag))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("no step counters for `{tag}`")))?,
        )?;
        if steps.len() != store.len() {
            return Err(Error::Checkpoint(format!("`{tag}` parameter count differs")));
        }
        for (i, p) in store.iter_mut().enumerate() {
            for (suffix, slot) in [("", &mut p.value), ("#m", &mut p.m), ("#v", &mut p.v)] {
                let t = self.get(&format!("{tag}/{}{suffix}", p.name))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "`{tag}/{}{suffix}` has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
            p.grad.fill(T::zero());
            p.step = steps[i];
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an IQRL checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let width = r.u32("scalar width")?;
        if width as usize != T::BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {width}-byte scalars, reader expects {} ({})",
                T::BYTES,
                T::NAME
            )));
        }
        let meta_len = r.u32("meta length")? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len, "meta")?)?;
        let count = r.u32("record count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?
                .to_string();
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * T::BYTES, &name)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes to a sibling temp file and renames, so a crash never leaves
    /// a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
