//! Binary embedding container.
//!
//! Layout, little-endian throughout:
//!
//! | field          | type        |
//! |----------------|-------------|
//! | magic          | `b"NMGE"`   |
//! | version        | u16 (= 1)   |
//! | magnification  | u8          |
//! | dim            | u32         |
//! | row count      | u64         |
//! | rows           | (u64 tile id, `dim` x f32) per row, sorted by tile id |

use std::fs;
use std::path::{Path, PathBuf};

use super::{EmbedError, Magnification};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"NMGE";
pub const EMBEDDING_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 8;
const FILE_EXT: &str = "nmge";

/// Per-tile feature rows for one slide at one magnification.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub slide_id: String,
    pub magnification: Magnification,
    dim: usize,
    tile_ids: Vec<u64>,
    data: Vec<f32>,
}

impl PartialEq for EmbeddingMatrix {
    /// Bitwise comparison of the stored reals.
    fn eq(&self, other: &Self) -> bool {
        self.slide_id == other.slide_id
            && self.magnification == other.magnification
            && self.dim == other.dim
            && self.tile_ids == other.tile_ids
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    /// Builds a matrix from `(tile_id, row)` pairs in any order.
    pub fn from_rows(
        slide_id: impl Into<String>,
        magnification: Magnification,
        dim: usize,
        rows: impl IntoIterator<Item = (u64, Vec<f32>)>,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let mut rows: Vec<(u64, Vec<f32>)> = rows.into_iter().collect();
        rows.sort_by_key(|r| r.0);
        let mut tile_ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (tile_id, row) in rows {
            if row.len() != dim {
                return Err(EmbedError::DimensionMismatch {
                    tile_id,
                    expected: dim,
                    found: row.len(),
                });
            }
            if tile_ids.last() == Some(&tile_id) {
                return Err(EmbedError::DuplicateTile(tile_id));
            }
            tile_ids.push(tile_id);
            data.extend_from_slice(&row);
        }
        Ok(Self {
            slide_id: slide_id.into(),
            magnification,
            dim,
            tile_ids,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tile_ids.is_empty()
    }

    pub fn tile_ids(&self) -> &[u64] {
        &self.tile_ids
    }

    pub fn row(&self, tile_id: u64) -> Option<&[f32]> {
        let i = self.tile_ids.binary_search(&tile_id).ok()?;
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.push(self.magnification.code());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, id) in self.tile_ids.iter().enumerate() {
            out.extend_from_slice(&id.to_le_bytes());
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container. The slide id is not stored in the payload and is supplied by the caller.
    pub fn decode(bytes: &[u8], slide_id: impl Into<String>) -> Result<Self, EmbedError> {
        if bytes.len() < 4 {
            return Err(EmbedError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[..4] != EMBEDDING_MAGIC {
            return Err(EmbedError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
        }
        if bytes.len() < HEADER_LEN {
            return Err(EmbedError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != EMBEDDING_VERSION {
            return Err(EmbedError::UnsupportedVersion(version));
        }
        let magnification = Magnification::from_code(bytes[6])?;
        let dim = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(bytes[11..19].try_into().unwrap());
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let row_len = 8 + 4 * dim;
        let expected = (rows as usize)
            .checked_mul(row_len)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or(EmbedError::Truncated {
                expected: usize::MAX,
                found: bytes.len(),
            })?;
        if bytes.len() < expected {
            return Err(EmbedError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(EmbedError::TrailingBytes(bytes.len() - expected));
        }
        let mut tile_ids = Vec::with_capacity(rows as usize);
        let mut data = Vec::with_capacity(rows as usize * dim);
        for chunk in bytes[HEADER_LEN..].chunks_exact(row_len) {
            let id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
            if let Some(&prev) = tile_ids.last() {
                if id <= prev {
                    return Err(EmbedError::UnsortedRows(id));
                }
            }
            tile_ids.push(id);
            data.extend(
                chunk[8..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
        }
        Ok(Self {
            slide_id: slide_id.into(),
            magnification,
            dim,
            tile_ids,
            data,
        })
    }
}

/// `<dir>/<slide_id>.<magnification>.nmge`
pub fn embedding_path(dir: &Path, slide_id: &str, magnification: Magnification) -> PathBuf {
    dir.join(format!("{slide_id}.{}.{FILE_EXT}", magnification.label()))
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: &Path) -> Result<(), EmbedError> {
    fs::write(path, matrix.encode()).map_err(|e| EmbedError::io(path, e))
}

/// Reads a container; the slide id is recovered from a `<slide_id>.<mag>.nmge`
/// file name, falling back to the file stem.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let bytes = fs::read(path).map_err(|e| EmbedError::io(path, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(".nmge").unwrap_or(name);
    let slide_id = match stem.rsplit_once('.') {
        Some((slide, mag)) if Magnification::from_label(mag).is_some() => slide,
        _ => stem,
    };
    EmbeddingMatrix::decode(&bytes, slide_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            "s1",
            Magnification::X100,
            4,
            vec![
                (7, vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0]),
                (2, vec![-0.0, 3.25, 1e-30, f32::MAX]),
                (11, vec![0.1, 0.2, 0.3, 0.4]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = sample();
        let back = EmbeddingMatrix::decode(&m.encode(), "s1").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.tile_ids(), &[2, 7, 11]);
        assert_eq!(back.row(2).unwrap()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn payload_size_arithmetic() {
        let rows = (0..5000u64).map(|i| (i, vec![0.5f32; 128]));
        let m = EmbeddingMatrix::from_rows("s", Magnification::X400, 128, rows).unwrap();
        let bytes = m.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 5000 * 8 + 128 * 5000 * 4);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().encode();
        bytes[..4].copy_from_slice(b"NMGX");
        assert!(matches!(
            EmbeddingMatrix::decode(&bytes, "s1"),
            Err(EmbedError::BadMagic(m)) if &m == b"NMGX"
        ));
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let bytes = sample().encode();
        assert!(matches!(
            EmbeddingMatrix::decode(&bytes[..bytes.len() - 1], "s1"),
            Err(EmbedError::Truncated { .. })
        ));
        assert!(matches!(
            EmbeddingMatrix::decode(&bytes[..10], "s1"),
            Err(EmbedError::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            EmbeddingMatrix::decode(&longer, "s1"),
            Err(EmbedError::TrailingBytes(1))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = EmbeddingMatrix::from_rows("s", Magnification::X25, 3, vec![(0, vec![1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch { tile_id: 0, expected: 3, found: 2 }));
    }

    #[test]
    fn version_and_magnification_checked() {
        let mut bytes = sample().encode();
        bytes[4] = 2;
        assert!(matches!(
            EmbeddingMatrix::decode(&bytes, "s"),
            Err(EmbedError::UnsupportedVersion(2))
        ));
        let mut bytes = sample().encode();
        bytes[6] = 9;
        assert!(matches!(
            EmbeddingMatrix::decode(&bytes, "s"),
            Err(EmbedError::BadMagnification(9))
        ));
    }

    #[test]
    fn file_round_trip_recovers_slide_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample();
        m.slide_id = "case.01".into();
        let path = embedding_path(dir.path(), "case.01", m.magnification);
        write_embeddings(&m, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.slide_id, "case.01");
        assert_eq!(back, m);
    }
}
