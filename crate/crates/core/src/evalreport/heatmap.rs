//! Region attention rendered over the tile grid: a JSON score dump and a
//! binary PGM with one pixel per tile.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::embedstore::NestedBag;
use crate::milmodels::ForwardTrace;
use crate::regiongrid::{RegionAssignment, TileRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRegion {
    pub region_id: usize,
    pub attention: f64,
    pub prediction: f64,
    /// Gray level of the region's tiles.
    pub intensity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTile {
    pub tile_id: u64,
    pub gx: i64,
    pub gy: i64,
    pub region_id: Option<usize>,
    /// Within-region tile attention; absent for tiles not in the bag.
    pub tile_attention: Option<f64>,
    pub region_attention: Option<f64>,
    pub region_prediction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDoc {
    pub slide_id: String,
    /// Grid coordinate of pixel (0, 0).
    pub origin: [i64; 2],
    pub width: usize,
    pub height: usize,
    pub regions: Vec<HeatmapRegion>,
    pub tiles: Vec<HeatmapTile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub doc: HeatmapDoc,
    pub pgm: Vec<u8>,
}

/// Per-slide min-max on region attention mapped to 1..=255, leaving 0 for
/// background. Equal attentions (including K = 1) map to 255.
pub fn intensities(attention: &[f64]) -> Vec<u8> {
    let lo = attention.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    attention
        .iter()
        .map(|&a| {
            if hi > lo {
                (1.0 + 254.0 * (a - lo) / (hi - lo)).round() as u8
            } else {
                255
            }
        })
        .collect()
}

pub fn export_heatmap(
    trace: &ForwardTrace,
    bag: &NestedBag,
    assignment: &RegionAssignment,
    tiles: &[TileRecord],
) -> Result<Heatmap, EvalError> {
    let slide = &assignment.slide_id;
    if bag.slide_id != *slide {
        return Err(EvalError::SlideMismatch(bag.slide_id.clone(), slide.clone()));
    }
    if let Some(t) = tiles.iter().find(|t| t.slide_id != *slide) {
        return Err(EvalError::SlideMismatch(t.slide_id.clone(), slide.clone()));
    }
    if trace.region_ids != bag.regions.iter().map(|r| r.region_id).collect::<Vec<_>>() {
        return Err(EvalError::SlideMismatch(bag.slide_id.clone(), "trace".into()));
    }
    if tiles.is_empty() {
        return Err(EvalError::Empty);
    }

    let levels = intensities(trace.region_attention.as_slice().expect("contiguous"));
    let regions: Vec<HeatmapRegion> = trace
        .region_ids
        .iter()
        .enumerate()
        .map(|(k, &region_id)| HeatmapRegion {
            region_id,
            attention: trace.region_attention[k],
            prediction: trace.region_scores[k],
            intensity: levels[k],
        })
        .collect();
    let slot: HashMap<usize, usize> = trace.region_ids.iter().enumerate().map(|(k, &r)| (r, k)).collect();
    let mut tile_att: HashMap<u64, f64> = HashMap::new();
    for (k, region) in bag.regions.iter().enumerate() {
        for (&t, &a) in region.tile_ids.iter().zip(trace.tile_attention[k].iter()) {
            tile_att.insert(t, a);
        }
    }
    let region_of = assignment.region_of();

    let min_x = tiles.iter().map(|t| t.gx).min().expect("non-empty");
    let max_x = tiles.iter().map(|t| t.gx).max().expect("non-empty");
    let min_y = tiles.iter().map(|t| t.gy).min().expect("non-empty");
    let max_y = tiles.iter().map(|t| t.gy).max().expect("non-empty");
    let width = (max_x - min_x + 1) as usize;
    let height = (max_y - min_y + 1) as usize;
    let mut pixels = vec![0u8; width * height];

    let mut sorted: Vec<&TileRecord> = tiles.iter().collect();
    sorted.sort_by_key(|t| t.tile_id);
    let mut out_tiles = Vec::with_capacity(sorted.len());
    for t in sorted {
        let region_id = region_of.get(&t.tile_id).copied();
        let k = region_id.and_then(|r| slot.get(&r).copied());
        if let Some(k) = k {
            pixels[(t.gy - min_y) as usize * width + (t.gx - min_x) as usize] = levels[k];
        }
        out_tiles.push(HeatmapTile {
            tile_id: t.tile_id,
            gx: t.gx,
            gy: t.gy,
            region_id,
            tile_attention: tile_att.get(&t.tile_id).copied(),
            region_attention: k.map(|k| trace.region_attention[k]),
            region_prediction: k.map(|k| trace.region_scores[k]),
        });
    }

    let mut pgm = format!("P5\n{width} {height}\n255\n").into_bytes();
    pgm.extend_from_slice(&pixels);
    Ok(Heatmap {
        doc: HeatmapDoc {
            slide_id: slide.clone(),
            origin: [min_x, min_y],
            width,
            height,
            regions,
            tiles: out_tiles,
        },
        pgm,
    })
}

/// Writes `<slide>.heatmap.json` and `<slide>.heatmap.pgm`.
pub fn write_heatmap(dir: &Path, heatmap: &Heatmap) -> Result<[PathBuf; 2], EvalError> {
    let json = dir.join(format!("{}.heatmap.json", heatmap.doc.slide_id));
    let pgm = dir.join(format!("{}.heatmap.pgm", heatmap.doc.slide_id));
    let mut body = serde_json::to_vec_pretty(&heatmap.doc).expect("heatmap serializes");
    body.push(b'\n');
    fs::write(&json, body).map_err(|e| EvalError::io(&json, e))?;
    fs::write(&pgm, &heatmap.pgm).map_err(|e| EvalError::io(&pgm, e))?;
    Ok([json, pgm])
}

pub fn read_heatmap_doc(path: &Path) -> Result<HeatmapDoc, EvalError> {
    let bytes = fs::read(path).map_err(|e| EvalError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| EvalError::Malformed(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{AttentionParams, ClassifierParams};
    use crate::embedstore::{BagRegion, Grade};
    use crate::milmodels::nmia_forward;
    use crate::regiongrid::{define_regions, RegionConfig};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tile(id: u64, gx: i64, gy: i64) -> TileRecord {
        TileRecord {
            slide_id: "s".into(),
            tile_id: id,
            gx,
            gy,
            tissue_class: None,
        }
    }

    /// Two 2x2 blocks far apart plus one stray tile.
    fn setup(split: bool) -> (Vec<TileRecord>, RegionAssignment, NestedBag) {
        let mut tiles = vec![tile(0, 0, 0), tile(1, 1, 0), tile(2, 0, 1), tile(3, 1, 1)];
        if split {
            tiles.extend([tile(4, 5, 0), tile(5, 6, 0), tile(6, 5, 1), tile(7, 6, 1)]);
        }
        tiles.push(tile(99, 3, 4));
        let cfg = RegionConfig {
            t_lower: 2,
            ..RegionConfig::default()
        };
        let assignment = define_regions(&tiles, &cfg).unwrap();
        let regions = assignment
            .regions
            .iter()
            .map(|r| BagRegion {
                region_id: r.region_id,
                tile_ids: r.tile_ids.clone(),
                instances: Array2::from_shape_fn((r.tile_ids.len(), 3), |(i, j)| {
                    (r.tile_ids[i] as f64 * 0.3 + j as f64).sin()
                }),
            })
            .collect();
        let bag = NestedBag {
            slide_id: "s".into(),
            label: Grade::High,
            regions,
        };
        (tiles, assignment, bag)
    }

    fn trace(bag: &NestedBag) -> ForwardTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = AttentionParams::init(3, 4, &mut rng);
        let r = AttentionParams::init(3, 4, &mut rng);
        let c = ClassifierParams::init(3, &mut rng);
        nmia_forward(bag, &t, &r, &c).unwrap()
    }

    #[test]
    fn single_region_is_max_intensity() {
        let (tiles, a, bag) = setup(false);
        let h = export_heatmap(&trace(&bag), &bag, &a, &tiles).unwrap();
        assert_eq!(h.doc.regions.len(), 1);
        assert_eq!(h.doc.regions[0].intensity, 255);
        let header = format!("P5\n{} {}\n255\n", h.doc.width, h.doc.height);
        assert!(h.pgm.starts_with(header.as_bytes()));
        let px = &h.pgm[header.len()..];
        assert_eq!(px.len(), h.doc.width * h.doc.height);
        assert_eq!(px[0], 255);
        // stray tile carries no region
        let stray = h.doc.tiles.iter().find(|t| t.tile_id == 99).unwrap();
        assert_eq!(stray.region_id, None);
    }

    #[test]
    fn brighter_for_higher_attention() {
        assert!(intensities(&[0.9, 0.1])[0] > intensities(&[0.9, 0.1])[1]);
        let (tiles, a, bag) = setup(true);
        let tr = trace(&bag);
        let h = export_heatmap(&tr, &bag, &a, &tiles).unwrap();
        let (r0, r1) = (&h.doc.regions[0], &h.doc.regions[1]);
        assert_eq!(r0.attention > r1.attention, r0.intensity > r1.intensity);
    }

    #[test]
    fn json_round_trip() {
        let (tiles, a, bag) = setup(true);
        let tr = trace(&bag);
        let h = export_heatmap(&tr, &bag, &a, &tiles).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let [json, _] = write_heatmap(dir.path(), &h).unwrap();
        let back = read_heatmap_doc(&json).unwrap();
        for (k, r) in back.regions.iter().enumerate() {
            assert!((r.attention - tr.region_attention[k]).abs() < 1e-12);
            assert!((r.prediction - tr.region_scores[k]).abs() < 1e-12);
        }
        for t in &back.tiles {
            if let Some(a) = t.tile_attention {
                let (k, i) = bag
                    .regions
                    .iter()
                    .enumerate()
                    .find_map(|(k, r)| r.tile_ids.iter().position(|&x| x == t.tile_id).map(|i| (k, i)))
                    .unwrap();
                assert!((a - tr.tile_attention[k][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slide_mismatch_rejected() {
        let (tiles, a, mut bag) = setup(false);
        let tr = trace(&bag);
        bag.slide_id = "other".into();
        assert!(matches!(
            export_heatmap(&tr, &bag, &a, &tiles),
            Err(EvalError::SlideMismatch(..))
        ));
    }
}
