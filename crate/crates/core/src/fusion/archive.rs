//! Weight archive layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "LEVITWA\0"
//! version    u32
//! meta_len   u32, then meta_len bytes of TOML (`fused` flag + `[model]` spec)
//! count      u32
//! entries    count x { name_len u32, name utf-8, dtype u8, ndim u8,
//!                      dims u64 x ndim, byte_len u64, data }
//! ```

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::Params;
use crate::error::{LevitError, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"LEVITWA\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub fused: bool,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian element bytes.
    pub data: Vec<u8>,
}

impl ArchiveEntry {
    pub fn from_tensor<E: Element>(name: &str, t: &Tensor<E>) -> Self {
        let mut data = Vec::with_capacity(t.numel() * E::DTYPE.size());
        t.data().iter().for_each(|v| v.write_le(&mut data));
        Self { name: name.to_owned(), dtype: E::DTYPE, shape: t.shape().to_vec(), data }
    }

    pub fn to_tensor<E: Element>(&self) -> Result<Tensor<E>> {
        if self.dtype != E::DTYPE {
            return Err(LevitError::EntryDType {
                name: self.name.clone(),
                expected: E::DTYPE.name(),
                got: self.dtype.name(),
            });
        }
        let values = self.data.chunks_exact(E::DTYPE.size()).map(E::read_le).collect();
        Tensor::new(&self.shape, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    pub meta: ArchiveMeta,
    pub entries: Vec<ArchiveEntry>,
}

impl WeightArchive {
    pub fn from_model<E: Element>(model: &Model<E>) -> Self {
        let mut entries = Vec::new();
        model.visit(&mut |name, t, _| entries.push(ArchiveEntry::from_tensor(name, t)));
        Self { meta: ArchiveMeta { fused: model.is_fused(), model: model.spec().clone() }, entries }
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = toml::to_string(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(LevitError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(LevitError::UnsupportedVersion(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|e| LevitError::Malformed { what: "metadata", reason: e.to_string() })?;
        let meta: ArchiveMeta =
            toml::from_str(meta_text).map_err(|e| LevitError::Malformed { what: "metadata", reason: e.to_string() })?;
        let count = r.u32("entry count")? as usize;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("entry name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "entry name")?.to_vec())
                .map_err(|e| LevitError::Malformed { what: "entry name", reason: e.to_string() })?;
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| LevitError::Malformed {
                what: "dtype",
                reason: format!("unknown tag {tag} for `{name}`"),
            })?;
            let ndim = r.take(1, "rank")?[0] as usize;
            let shape = (0..ndim).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64("byte length")? as usize;
            let expected = shape.iter().product::<usize>() * dtype.size();
            if byte_len != expected {
                return Err(LevitError::Malformed {
                    what: "entry",
                    reason: format!("`{name}` declares {byte_len} bytes, shape {shape:?} needs {expected}"),
                });
            }
            let data = r.take(byte_len, "entry data")?.to_vec();
            if !seen.insert(name.clone()) {
                return Err(LevitError::DuplicateEntry(name));
            }
            entries.push(ArchiveEntry { name, dtype, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(LevitError::Malformed {
                what: "archive",
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { meta, entries })
    }

    /// Builds a model from the stored spec and fills in every tensor,
    /// checking names, shapes and dtype against what the spec produces.
    pub fn into_model<E: Element>(&self) -> Result<Model<E>> {
        let mut model: Model<E> = Model::build(&self.meta.model, 0)?;
        if self.meta.fused {
            super::fuse_in_place(&mut model);
        }
        let by_name: HashMap<&str, &ArchiveEntry> = self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut used = HashSet::new();
        let mut failure = None;
        model.visit_mut(&mut |name, t, _| {
            if failure.is_some() {
                return;
            }
            let result = match by_name.get(name) {
                None => Err(LevitError::MissingEntry(name.to_owned())),
                Some(e) if e.shape != t.shape() => Err(LevitError::EntryShape {
                    name: name.to_owned(),
                    expected: t.shape().to_vec(),
                    got: e.shape.clone(),
                }),
                Some(e) => e.to_tensor().map(|v| {
                    *t = v;
                    used.insert(name.to_owned());
                }),
            };
            if let Err(e) = result {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = self.entries.iter().find(|e| !used.contains(&e.name)) {
            return Err(LevitError::UnexpectedEntry(extra.name.clone()));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(LevitError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save<E: Element>(model: &Model<E>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, WeightArchive::from_model(model).to_bytes())?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<WeightArchive> {
    WeightArchive::from_bytes(&std::fs::read(path)?)
}

pub fn load<E: Element>(path: impl AsRef<Path>) -> Result<Model<E>> {
    load_archive(path)?.into_model()
}
