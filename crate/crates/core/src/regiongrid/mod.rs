//! Region definition on the tile lattice.
//!
//! Urothelium tiles are grouped into 8-connected blobs, blobs below the lower
//! size threshold are discarded, and blobs at or above the upper threshold are
//! split with k-means on their grid coordinates. Every surviving cluster is a
//! region, the inner bag of the nested model.

mod kmeans;
mod manifest;

use std::collections::{HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{group_by_slide, parse_manifest, read_manifest, write_manifest, ManifestError};

#[derive(Debug, Error, PartialEq)]
pub enum RegionError {
    #[error("slide {slide_id}: tiles {first} and {second} share grid coordinate ({gx}, {gy})")]
    CoordinateCollision {
        slide_id: String,
        gx: i64,
        gy: i64,
        first: u64,
        second: u64,
    },
    #[error("slide {slide_id}: tile id {tile_id} appears more than once")]
    DuplicateTileId { slide_id: String, tile_id: u64 },
    #[error("tiles from more than one slide passed together ({0} and {1})")]
    MixedSlides(String, String),
    #[error("invalid region config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueClass {
    Urothelium,
    #[serde(rename = "lamina propria")]
    LaminaPropria,
    Muscle,
    Blood,
    Damage,
    Background,
}

/// One tile on the 400x lattice of a slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    pub tile_id: u64,
    pub gx: i64,
    pub gy: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tissue_class: Option<TissueClass>,
}

impl TileRecord {
    /// Unset tissue class counts as urothelium.
    pub fn is_urothelium(&self) -> bool {
        matches!(self.tissue_class, None | Some(TissueClass::Urothelium))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridTile {
    pub tile_id: u64,
    pub gx: i64,
    pub gy: i64,
}

/// A maximal 8-connected group of tiles, members sorted by tile id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub tiles: Vec<GridTile>,
}

impl Blob {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile_ids(&self) -> Vec<u64> {
        self.tiles.iter().map(|t| t.tile_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: usize,
    pub tile_ids: Vec<u64>,
    pub centroid: [f64; 2],
    pub parent_blob_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionConfig {
    pub t_lower: usize,
    pub t_upper: usize,
    pub kmeans_seed: u64,
    pub kmeans_max_iters: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            t_lower: 8,
            t_upper: 200,
            kmeans_seed: 0,
            kmeans_max_iters: 100,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<(), RegionError> {
        if self.t_lower < 1 {
            return Err(RegionError::InvalidConfig("t_lower must be at least 1".into()));
        }
        if self.t_upper <= self.t_lower {
            return Err(RegionError::InvalidConfig(format!(
                "t_upper ({}) must exceed t_lower ({})",
                self.t_upper, self.t_lower
            )));
        }
        if self.kmeans_max_iters < 1 {
            return Err(RegionError::InvalidConfig("kmeans_max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Region assignment for one slide, serialized as the region assignment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAssignment {
    pub slide_id: String,
    pub regions: Vec<Region>,
    /// Tiles dropped with blobs smaller than `t_lower`.
    pub discarded_tiles: usize,
    /// Tiles excluded up front for a non-urothelium tissue class.
    #[serde(default)]
    pub non_urothelium_tiles: usize,
    /// Set when no region survived; the slide cannot be used.
    #[serde(default)]
    pub unusable: bool,
    pub config: RegionConfig,
}

impl RegionAssignment {
    pub fn region_of(&self) -> HashMap<u64, usize> {
        self.regions
            .iter()
            .flat_map(|r| r.tile_ids.iter().map(move |&t| (t, r.region_id)))
            .collect()
    }
}

const NEIGHBOURS: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn check_single_slide(tiles: &[TileRecord]) -> Result<(), RegionError> {
    if let Some(first) = tiles.first() {
        if let Some(other) = tiles.iter().find(|t| t.slide_id != first.slide_id) {
            return Err(RegionError::MixedSlides(first.slide_id.clone(), other.slide_id.clone()));
        }
    }
    Ok(())
}

/// Maximal 8-connected components of `tiles`, ordered by smallest member tile id.
pub fn extract_blobs(tiles: &[TileRecord]) -> Result<Vec<Blob>, RegionError> {
    check_single_slide(tiles)?;
    let mut order: Vec<&TileRecord> = tiles.iter().collect();
    order.sort_by_key(|t| t.tile_id);

    let mut at: HashMap<(i64, i64), usize> = HashMap::with_capacity(order.len());
    for (i, t) in order.iter().enumerate() {
        if i > 0 && order[i - 1].tile_id == t.tile_id {
            return Err(RegionError::DuplicateTileId {
                slide_id: t.slide_id.clone(),
                tile_id: t.tile_id,
            });
        }
        if let Some(&j) = at.get(&(t.gx, t.gy)) {
            return Err(RegionError::CoordinateCollision {
                slide_id: t.slide_id.clone(),
                gx: t.gx,
                gy: t.gy,
                first: order[j].tile_id,
                second: t.tile_id,
            });
        }
        at.insert((t.gx, t.gy), i);
    }

    let mut seen = vec![false; order.len()];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..order.len() {
        if seen[seed] {
            continue;
        }
        seen[seed] = true;
        queue.push_back(seed);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            let t = order[i];
            members.push(GridTile {
                tile_id: t.tile_id,
                gx: t.gx,
                gy: t.gy,
            });
            for (dx, dy) in NEIGHBOURS {
                if let Some(&j) = at.get(&(t.gx + dx, t.gy + dy)) {
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        members.sort_by_key(|m| m.tile_id);
        blobs.push(Blob { tiles: members });
    }
    Ok(blobs)
}

/// Keeps blobs with at least `t_lower` tiles; returns them with the number of dropped tiles.
pub fn filter_blobs(blobs: Vec<Blob>, t_lower: usize) -> (Vec<Blob>, usize) {
    let mut discarded = 0;
    let kept = blobs
        .into_iter()
        .filter(|b| {
            let keep = b.len() >= t_lower;
            if !keep {
                discarded += b.len();
            }
            keep
        })
        .collect();
    (kept, discarded)
}

/// Number of regions a blob of `n_tiles` is split into.
pub fn cluster_count(n_tiles: usize, t_upper: usize) -> usize {
    if n_tiles < t_upper {
        1
    } else {
        n_tiles.div_ceil(t_upper)
    }
}

fn make_region(tiles: &[GridTile], parent_blob_id: usize) -> Region {
    let n = tiles.len() as f64;
    let sx: f64 = tiles.iter().map(|t| t.gx as f64).sum();
    let sy: f64 = tiles.iter().map(|t| t.gy as f64).sum();
    let mut tile_ids: Vec<u64> = tiles.iter().map(|t| t.tile_id).collect();
    tile_ids.sort_unstable();
    Region {
        region_id: 0,
        tile_ids,
        centroid: [sx / n, sy / n],
        parent_blob_id,
    }
}

/// Splits a kept blob into regions. Region ids are local (0-based, ordered by
/// smallest member tile id) and are renumbered by [`define_regions`].
pub fn split_blob(blob: &Blob, parent_blob_id: usize, config: &RegionConfig) -> Vec<Region> {
    let k = cluster_count(blob.len(), config.t_upper);
    let mut regions = if k == 1 {
        vec![make_region(&blob.tiles, parent_blob_id)]
    } else {
        let points: Vec<[f64; 2]> = blob.tiles.iter().map(|t| [t.gx as f64, t.gy as f64]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.kmeans_seed);
        rng.set_stream(parent_blob_id as u64);
        let assign = kmeans::kmeans(&points, k, config.kmeans_max_iters, &mut rng);
        let mut groups: Vec<Vec<GridTile>> = vec![Vec::new(); k];
        for (tile, &c) in blob.tiles.iter().zip(&assign) {
            groups[c].push(*tile);
        }
        let mut regions: Vec<Region> = groups.iter().map(|g| make_region(g, parent_blob_id)).collect();
        regions.sort_by_key(|r| r.tile_ids[0]);
        regions
    };
    for (i, r) in regions.iter_mut().enumerate() {
        r.region_id = i;
    }
    regions
}

/// Full region definition for one slide: urothelium selection, blob extraction,
/// size filtering and splitting. Region ids run `0..K` in blob order, then cluster order.
pub fn define_regions(tiles: &[TileRecord], config: &RegionConfig) -> Result<RegionAssignment, RegionError> {
    config.validate()?;
    check_single_slide(tiles)?;
    let slide_id = tiles.first().map(|t| t.slide_id.clone()).unwrap_or_default();
    let uro: Vec<TileRecord> = tiles.iter().filter(|t| t.is_urothelium()).cloned().collect();
    let non_urothelium_tiles = tiles.len() - uro.len();

    let blobs = extract_blobs(&uro)?;
    let (kept, discarded_tiles) = filter_blobs(blobs, config.t_lower);
    let mut regions = Vec::new();
    for (blob_id, blob) in kept.iter().enumerate() {
        regions.extend(split_blob(blob, blob_id, config));
    }
    for (i, r) in regions.iter_mut().enumerate() {
        r.region_id = i;
    }
    Ok(RegionAssignment {
        slide_id,
        unusable: regions.is_empty(),
        regions,
        discarded_tiles,
        non_urothelium_tiles,
        config: *config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(id: u64, gx: i64, gy: i64) -> TileRecord {
        TileRecord {
            slide_id: "s".into(),
            tile_id: id,
            gx,
            gy,
            tissue_class: None,
        }
    }

    fn blob_of(n: usize) -> Blob {
        Blob {
            tiles: (0..n as u64)
                .map(|i| GridTile {
                    tile_id: i,
                    gx: (i % 10) as i64,
                    gy: (i / 10) as i64,
                })
                .collect(),
        }
    }

    /// A filled rectangle of `n` tiles starting at column `x0`, ids from `id0`.
    fn rect(id0: u64, x0: i64, n: usize, width: i64) -> Vec<TileRecord> {
        (0..n as i64)
            .map(|i| tile(id0 + i as u64, x0 + i % width, i / width))
            .collect()
    }

    #[test]
    fn diagonal_neighbours_join() {
        let blobs = extract_blobs(&[tile(0, 0, 0), tile(1, 1, 1)]).unwrap();
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].len(), 2);
    }

    #[test]
    fn chebyshev_two_is_separate() {
        let blobs = extract_blobs(&[tile(0, 0, 0), tile(1, 2, 2)]).unwrap();
        assert_eq!(blobs.len(), 2);
        assert!(blobs.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn blobs_ordered_by_smallest_member() {
        let blobs = extract_blobs(&[tile(5, 0, 0), tile(1, 10, 0), tile(3, 1, 0), tile(9, 11, 1)]).unwrap();
        assert_eq!(blobs[0].tile_ids(), vec![1, 9]);
        assert_eq!(blobs[1].tile_ids(), vec![3, 5]);
    }

    #[test]
    fn coordinate_collision_rejected() {
        let err = extract_blobs(&[tile(0, 4, 4), tile(1, 4, 4)]).unwrap_err();
        assert!(matches!(err, RegionError::CoordinateCollision { gx: 4, gy: 4, .. }));
    }

    #[test]
    fn mixed_slides_rejected() {
        let mut other = tile(1, 5, 5);
        other.slide_id = "t".into();
        assert!(matches!(
            extract_blobs(&[tile(0, 0, 0), other]),
            Err(RegionError::MixedSlides(..))
        ));
    }

    #[test]
    fn filter_threshold_is_inclusive() {
        let blobs = vec![blob_of(3), blob_of(8), blob_of(20)];
        let (kept, dropped) = filter_blobs(blobs, 8);
        assert_eq!(kept.iter().map(Blob::len).collect::<Vec<_>>(), vec![8, 20]);
        assert_eq!(dropped, 3);

        let (kept, dropped) = filter_blobs(vec![blob_of(3), blob_of(1)], 1);
        assert_eq!(kept.len(), 2);
        assert_eq!(dropped, 0);

        let (kept, dropped) = filter_blobs(vec![blob_of(7), blob_of(7)], 8);
        assert!(kept.is_empty());
        assert_eq!(dropped, 14);
    }

    #[test]
    fn split_counts() {
        let cfg = RegionConfig {
            t_lower: 1,
            t_upper: 100,
            ..RegionConfig::default()
        };
        let regions = split_blob(&blob_of(250), 0, &cfg);
        assert_eq!(regions.len(), 3);
        assert_eq!(regions.iter().map(|r| r.tile_ids.len()).sum::<usize>(), 250);

        let b = blob_of(99);
        let regions = split_blob(&b, 0, &cfg);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].tile_ids, b.tile_ids());

        assert_eq!(split_blob(&blob_of(100), 0, &cfg).len(), 1);
    }

    #[test]
    fn two_blob_scenario() {
        let cfg = RegionConfig {
            t_lower: 8,
            t_upper: 50,
            ..RegionConfig::default()
        };
        let mut tiles = rect(0, 0, 100, 10);
        tiles.extend(rect(1000, 30, 5, 5));
        let out = define_regions(&tiles, &cfg).unwrap();
        assert_eq!(out.regions.len(), 2);
        assert_eq!(out.discarded_tiles, 5);
        assert!(out.regions.iter().all(|r| r.tile_ids.iter().all(|&t| t < 1000)));
        assert_eq!(out.regions.iter().map(|r| r.region_id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn exact_lower_threshold_kept() {
        let cfg = RegionConfig::default();
        let out = define_regions(&rect(0, 0, 8, 4), &cfg).unwrap();
        assert_eq!(out.regions.len(), 1);
        assert!(!out.unusable);
    }

    #[test]
    fn all_discarded_flags_slide() {
        let out = define_regions(&rect(0, 0, 3, 3), &RegionConfig::default()).unwrap();
        assert!(out.regions.is_empty());
        assert!(out.unusable);
        assert_eq!(out.discarded_tiles, 3);
    }

    #[test]
    fn non_urothelium_tiles_skipped() {
        let mut tiles = rect(0, 0, 10, 5);
        for t in tiles.iter_mut().take(4) {
            t.tissue_class = Some(TissueClass::Muscle);
        }
        tiles[4].tissue_class = Some(TissueClass::Urothelium);
        let cfg = RegionConfig {
            t_lower: 2,
            ..RegionConfig::default()
        };
        let out = define_regions(&tiles, &cfg).unwrap();
        assert_eq!(out.non_urothelium_tiles, 4);
        let n: usize = out.regions.iter().map(|r| r.tile_ids.len()).sum();
        assert_eq!(n, 6);
    }

    #[test]
    fn config_validation() {
        let bad = RegionConfig {
            t_lower: 10,
            t_upper: 10,
            ..RegionConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(RegionConfig {
            t_lower: 0,
            ..RegionConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn centroid_is_mean_coordinate() {
        let out = define_regions(&rect(0, 0, 8, 4), &RegionConfig::default()).unwrap();
        assert_eq!(out.regions[0].centroid, [1.5, 0.5]);
    }
}
