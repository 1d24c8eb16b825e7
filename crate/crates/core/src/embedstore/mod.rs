//! Tile embeddings: storage, scale fusion, nested bag assembly and synthetic data.

mod bags;
mod container;
mod labels;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bags::{assemble_bag, assemble_bags, slide_seed, BagRegion, NestedBag, MAX_TILES_PER_SLIDE};
pub use container::{
    embedding_path, read_embeddings, write_embeddings, EmbeddingMatrix, EMBEDDING_MAGIC, EMBEDDING_VERSION, HEADER_LEN,
};
pub(crate) use labels::{read_jsonl, write_jsonl};
pub use labels::{
    read_annotations, read_events, read_labels, write_annotations, write_events, write_labels, LabelRecord,
    RegionAnnotation, SlideEvent,
};
pub use synth::{synth_generate, Split, SynthConfig, SynthDataset, SynthSlide};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("bad magic {0:?}, expected \"NMGE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown magnification code {0}")]
    BadMagnification(u8),
    #[error("truncated container: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes after last row")]
    TrailingBytes(usize),
    #[error("tile {tile_id}: row has {found} values, expected {expected}")]
    DimensionMismatch { tile_id: u64, expected: usize, found: usize },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("tile {0} stored more than once")]
    DuplicateTile(u64),
    #[error("rows not sorted by tile id at tile {0}")]
    UnsortedRows(u64),
    #[error("slide {slide_id}: tile {tile_id} has no {magnification} embedding")]
    MissingScale {
        slide_id: String,
        tile_id: u64,
        magnification: Magnification,
    },
    #[error("slide {slide_id}: embedding dimensions differ across magnifications ({first} vs {second})")]
    InconsistentDims { slide_id: String, first: usize, second: usize },
    #[error("slide {0}: region assignment references a tile missing from the manifest: {1}")]
    UnknownTile(String, u64),
    #[error("slide {0} has no label")]
    MissingLabel(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),
    #[error("line {line} of {path}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl EmbedError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        EmbedError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "400x")]
    X400,
    #[serde(rename = "100x")]
    X100,
    #[serde(rename = "25x")]
    X25,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X400, Magnification::X100, Magnification::X25];

    pub fn code(self) -> u8 {
        match self {
            Magnification::X400 => 0,
            Magnification::X100 => 1,
            Magnification::X25 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, EmbedError> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(EmbedError::BadMagnification(code))
    }

    pub fn label(self) -> &'static str {
        match self {
            Magnification::X400 => "400x",
            Magnification::X100 => "100x",
            Magnification::X25 => "25x",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == s)
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which magnifications feed the model: 400x, 400x+100x, or all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Mono,
    Di,
    Tri,
}

impl ScaleMode {
    pub fn scales(self) -> &'static [Magnification] {
        match self {
            ScaleMode::Mono => &Magnification::ALL[..1],
            ScaleMode::Di => &Magnification::ALL[..2],
            ScaleMode::Tri => &Magnification::ALL[..],
        }
    }

    pub fn fused_dim(self, d_f: usize) -> usize {
        self.scales().len() * d_f
    }
}

impl FromStr for ScaleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mono" => Ok(ScaleMode::Mono),
            "di" => Ok(ScaleMode::Di),
            "tri" => Ok(ScaleMode::Tri),
            _ => Err(format!("unknown scale mode {s:?} (mono|di|tri)")),
        }
    }
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::Mono => "mono",
            ScaleMode::Di => "di",
            ScaleMode::Tri => "tri",
        })
    }
}

/// Slide grade; the weak label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "LG")]
    Low = 0,
    #[serde(rename = "HG")]
    High = 1,
}

impl Grade {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Grade::Low
        } else {
            Grade::High
        }
    }

    pub fn is_high(self) -> bool {
        self == Grade::High
    }
}

/// All stored magnifications for one slide.
#[derive(Debug, Clone, Default)]
pub struct SlideEmbeddings {
    pub slide_id: String,
    pub by_scale: BTreeMap<Magnification, EmbeddingMatrix>,
}

impl SlideEmbeddings {
    pub fn new(slide_id: impl Into<String>) -> Self {
        Self {
            slide_id: slide_id.into(),
            by_scale: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, matrix: EmbeddingMatrix) {
        self.by_scale.insert(matrix.magnification, matrix);
    }

    /// Loads the magnifications required by `mode` from `<dir>/<slide>.<mag>.nmge`.
    pub fn load(dir: &Path, slide_id: &str, mode: ScaleMode) -> Result<Self, EmbedError> {
        let mut out = Self::new(slide_id);
        for &mag in mode.scales() {
            let path = embedding_path(dir, slide_id, mag);
            let mut m = read_embeddings(&path)?;
            m.slide_id = slide_id.to_string();
            out.insert(m);
        }
        Ok(out)
    }

    /// Shared per-scale dimension of the magnifications `mode` uses.
    pub fn scale_dim(&self, mode: ScaleMode) -> Result<usize, EmbedError> {
        let mut dim = None;
        for mag in mode.scales() {
            let m = self.by_scale.get(mag).ok_or_else(|| EmbedError::MissingScale {
                slide_id: self.slide_id.clone(),
                tile_id: 0,
                magnification: *mag,
            })?;
            match dim {
                None => dim = Some(m.dim()),
                Some(d) if d != m.dim() => {
                    return Err(EmbedError::InconsistentDims {
                        slide_id: self.slide_id.clone(),
                        first: d,
                        second: m.dim(),
                    })
                }
                _ => {}
            }
        }
        Ok(dim.expect("scale modes are non-empty"))
    }
}

/// Concatenates one tile's rows in 400x, 100x, 25x order, restricted to `mode`.
pub fn fuse_scales(tile_id: u64, embeddings: &SlideEmbeddings, mode: ScaleMode) -> Result<Vec<f64>, EmbedError> {
    let mut out = Vec::new();
    fuse_into(tile_id, embeddings, mode, &mut out)?;
    Ok(out)
}

pub(crate) fn fuse_into(
    tile_id: u64,
    embeddings: &SlideEmbeddings,
    mode: ScaleMode,
    out: &mut Vec<f64>,
) -> Result<(), EmbedError> {
    for &mag in mode.scales() {
        let missing = || EmbedError::MissingScale {
            slide_id: embeddings.slide_id.clone(),
            tile_id,
            magnification: mag,
        };
        let row = embeddings
            .by_scale
            .get(&mag)
            .ok_or_else(missing)?
            .row(tile_id)
            .ok_or_else(missing)?;
        out.extend(row.iter().map(|&v| v as f64));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slide() -> SlideEmbeddings {
        let mut s = SlideEmbeddings::new("s");
        for (k, mag) in Magnification::ALL.into_iter().enumerate() {
            let rows = (0..3u64).map(|t| (t, (0..4).map(|j| (100 * k as u64 + 10 * t + j) as f32).collect()));
            s.insert(EmbeddingMatrix::from_rows("s", mag, 4, rows).unwrap());
        }
        s
    }

    #[test]
    fn mono_is_400x_row() {
        let s = slide();
        let v = fuse_scales(1, &s, ScaleMode::Mono).unwrap();
        let row: Vec<f64> = s.by_scale[&Magnification::X400].row(1).unwrap().iter().map(|&x| x as f64).collect();
        assert_eq!(v, row);
    }

    #[test]
    fn tri_layout_and_di_prefix() {
        let s = slide();
        let tri = fuse_scales(2, &s, ScaleMode::Tri).unwrap();
        let di = fuse_scales(2, &s, ScaleMode::Di).unwrap();
        assert_eq!(tri.len(), 12);
        assert_eq!(tri[..4], [20.0, 21.0, 22.0, 23.0]);
        assert_eq!(tri[4..8], [120.0, 121.0, 122.0, 123.0]);
        assert_eq!(tri[8..], [220.0, 221.0, 222.0, 223.0]);
        assert_eq!(&tri[..8], &di[..]);
    }

    #[test]
    fn fused_length_is_scale_count_times_dim() {
        assert_eq!(ScaleMode::Tri.fused_dim(128), 384);
        assert_eq!(ScaleMode::Di.fused_dim(128), 256);
        assert_eq!(ScaleMode::Mono.fused_dim(128), 128);
    }

    #[test]
    fn missing_scale_names_tile_and_scale() {
        let mut s = slide();
        s.by_scale.remove(&Magnification::X25);
        match fuse_scales(1, &s, ScaleMode::Tri) {
            Err(EmbedError::MissingScale {
                tile_id, magnification, ..
            }) => {
                assert_eq!(tile_id, 1);
                assert_eq!(magnification, Magnification::X25);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(fuse_scales(1, &s, ScaleMode::Di).is_ok());
        assert!(matches!(
            fuse_scales(99, &s, ScaleMode::Mono),
            Err(EmbedError::MissingScale { tile_id: 99, .. })
        ));
    }

    #[test]
    fn grade_serde_names() {
        assert_eq!(serde_json::to_string(&Grade::High).unwrap(), "\"HG\"");
        assert_eq!(serde_json::from_str::<Grade>("\"LG\"").unwrap(), Grade::Low);
    }
}
