//! Named parameter trees and the `FARM` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"FARM"
//! version  u32      1 = 32-bit payload, 2 = 64-bit payload
//! count    u32
//! entries  count x {
//!     name_len u32, name [u8; name_len] (UTF-8),
//!     rank u32, extents [u64; rank],
//!     data [f32|f64; product(extents)]
//! }
//! ```
//!
//! Entries are written in the tree's (sorted) iteration order, so
//! save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"FARM";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;

/// Ordered map from dotted path name to tensor. Every entry is trainable.
#[derive(Clone, PartialEq)]
pub struct ParamTree<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> std::fmt::Debug for ParamTree<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, v)| (k, v.shape())))
            .finish()
    }
}

impl<T: Float> Default for ParamTree<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamTree<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a new entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "ParamTree::insert",
                detail: format!("duplicate parameter name `{name}`"),
            });
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subtree(&self, prefix: &str) -> ParamTree<T> {
        ParamTree {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Moves every entry of `other` in, replacing existing names.
    pub fn extend(&mut self, other: ParamTree<T>) {
        self.entries.extend(other.entries);
    }

    pub fn cast<U: Float>(&self) -> ParamTree<U> {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let version = if T::BYTES == 4 { VERSION_F32 } else { VERSION_F64 };
        w.write_all(MAGIC)?;
        w.write_all(&version.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
            for &v in t.data() {
                if T::BYTES == 4 {
                    buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                } else {
                    buf.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads either payload width, converting to `T`.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        let width = match version {
            VERSION_F32 => 4,
            VERSION_F64 => 8,
            v => return Err(TensorError::Format(format!("unsupported version {v}"))),
        };
        let count = read_u32(r)?;
        let mut tree = ParamTree::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Format("entry name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * width];
            r.read_exact(&mut raw)?;
            let data: Vec<T> = if width == 4 {
                raw.chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect()
            };
            let t = Tensor::new(shape, data)
                .map_err(|e| TensorError::Format(format!("entry `{name}`: {e}")))?;
            tree.insert(name, t)
                .map_err(|e| TensorError::Format(e.to_string()))?;
        }
        Ok(tree)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
