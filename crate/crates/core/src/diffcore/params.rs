//! Named parameter blocks and the binary checkpoint container.
//!
//! Checkpoint layout, little-endian:
//! magic `b"NMGP"`, version u16, block count u32, then per block in name
//! order: name length u16, UTF-8 name, rank u8, rank x u64 dims, f64 entries
//! in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NMGP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"NMGP\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last block")]
    TrailingBytes(usize),
    #[error("block name is not valid UTF-8")]
    BadName,
    #[error("blocks out of order or duplicated at {0:?}")]
    BlockOrder(String),
    #[error("missing parameter block {0:?}")]
    MissingBlock(String),
    #[error("block {name:?} has shape {found:?}, expected {expected:?}")]
    BlockShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Ordered map of named f64 tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: BTreeMap<String, ArrayD<f64>>,
}

impl PartialEq for ParamStore {
    /// Bitwise equality of every entry.
    fn eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|((na, a), (nb, b))| {
                na == nb && a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.blocks.insert(name.into(), value);
    }

    pub fn insert_1(&mut self, name: impl Into<String>, value: &Array1<f64>) {
        self.insert(name, value.clone().into_dyn());
    }

    pub fn insert_2(&mut self, name: impl Into<String>, value: &Array2<f64>) {
        self.insert(name, value.clone().into_dyn());
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.blocks.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.blocks.get_mut(name)
    }

    /// Panics if the block is absent or not rank 1.
    pub fn get_1(&self, name: &str) -> Array1<f64> {
        self.blocks[name].clone().into_dimensionality().expect("rank-1 block")
    }

    /// Panics if the block is absent or not rank 2.
    pub fn get_2(&self, name: &str) -> Array2<f64> {
        self.blocks[name].clone().into_dimensionality().expect("rank-2 block")
    }

    pub fn try_get_1(&self, name: &str) -> Result<Array1<f64>, CheckpointError> {
        let b = self.blocks.get(name).ok_or_else(|| CheckpointError::MissingBlock(name.into()))?;
        b.clone().into_dimensionality().map_err(|_| CheckpointError::BlockShape {
            name: name.into(),
            expected: vec![0],
            found: b.shape().to_vec(),
        })
    }

    pub fn try_get_2(&self, name: &str) -> Result<Array2<f64>, CheckpointError> {
        let b = self.blocks.get(name).ok_or_else(|| CheckpointError::MissingBlock(name.into()))?;
        b.clone().into_dimensionality().map_err(|_| CheckpointError::BlockShape {
            name: name.into(),
            expected: vec![0, 0],
            found: b.shape().to_vec(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.blocks.values().map(ArrayD::len).sum()
    }

    /// `self += alpha * other` on every block present in both.
    pub fn scaled_add(&mut self, alpha: f64, other: &ParamStore) {
        for (name, block) in self.blocks.iter_mut() {
            if let Some(g) = other.blocks.get(name) {
                block.scaled_add(alpha, g);
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, block) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(block.ndim() as u8);
            for &d in block.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut store = ParamStore::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(CheckpointError::BlockOrder(name));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated(r.pos))?;
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let block = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length matches shape");
            store.insert(name.clone(), block);
            last = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(self.pos)),
        }
    }
}

pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, store.encode()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ParamStore::decode(&bytes)
}
