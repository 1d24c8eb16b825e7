use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fuse_into, EmbedError, Grade, ScaleMode, SlideEmbeddings};
use crate::regiongrid::{RegionAssignment, TileRecord};

/// Per-slide instance cap applied before region grouping.
pub const MAX_TILES_PER_SLIDE: usize = 5000;

/// One inner bag: the fused embeddings of a region's tiles, rows in ascending tile id.
#[derive(Debug, Clone, PartialEq)]
pub struct BagRegion {
    pub region_id: usize,
    pub tile_ids: Vec<u64>,
    pub instances: Array2<f64>,
}

/// A slide as a bag of region bags with its weak label.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedBag {
    pub slide_id: String,
    pub label: Grade,
    pub regions: Vec<BagRegion>,
}

impl NestedBag {
    pub fn k(&self) -> usize {
        self.regions.len()
    }

    pub fn n_instances(&self) -> usize {
        self.regions.iter().map(|r| r.instances.nrows()).sum()
    }

    pub fn dim(&self) -> usize {
        self.regions.first().map_or(0, |r| r.instances.ncols())
    }

    /// All instances stacked region after region.
    pub fn flatten(&self) -> Array2<f64> {
        let views: Vec<_> = self.regions.iter().map(|r| r.instances.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("regions share the fused dimension")
    }

    pub fn instance_counts(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.instances.nrows()).collect()
    }
}

/// FNV-1a of the slide id; stable across platforms and runs.
pub fn slide_seed(slide_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in slide_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Builds one nested bag. Returns `Ok(None)` when the slide has no region.
///
/// When the assigned tiles exceed [`MAX_TILES_PER_SLIDE`], a uniform sample
/// without replacement (seeded from the slide id) is kept before grouping;
/// regions left empty by the sample are dropped.
pub fn assemble_bag(
    manifest: &[TileRecord],
    assignment: &RegionAssignment,
    embeddings: &SlideEmbeddings,
    mode: ScaleMode,
    label: Grade,
) -> Result<Option<NestedBag>, EmbedError> {
    let slide_id = &assignment.slide_id;
    let known: HashSet<u64> = manifest.iter().map(|t| t.tile_id).collect();
    let mut assigned: Vec<u64> = assignment.regions.iter().flat_map(|r| r.tile_ids.iter().copied()).collect();
    if let Some(&t) = assigned.iter().find(|t| !known.contains(t)) {
        return Err(EmbedError::UnknownTile(slide_id.clone(), t));
    }
    assigned.sort_unstable();

    let keep: Option<HashSet<u64>> = (assigned.len() > MAX_TILES_PER_SLIDE).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(slide_seed(slide_id));
        index::sample(&mut rng, assigned.len(), MAX_TILES_PER_SLIDE)
            .into_iter()
            .map(|i| assigned[i])
            .collect()
    });

    let dim = mode.fused_dim(embeddings.scale_dim(mode)?);
    let mut regions = Vec::new();
    let mut buf = Vec::with_capacity(dim);
    for region in &assignment.regions {
        let mut tile_ids: Vec<u64> = region
            .tile_ids
            .iter()
            .copied()
            .filter(|t| keep.as_ref().is_none_or(|k| k.contains(t)))
            .collect();
        if tile_ids.is_empty() {
            continue;
        }
        tile_ids.sort_unstable();
        let mut data = Vec::with_capacity(tile_ids.len() * dim);
        for &t in &tile_ids {
            buf.clear();
            fuse_into(t, embeddings, mode, &mut buf)?;
            data.extend_from_slice(&buf);
        }
        let instances = Array2::from_shape_vec((tile_ids.len(), dim), data).expect("row lengths checked by fusion");
        regions.push(BagRegion {
            region_id: region.region_id,
            tile_ids,
            instances,
        });
    }
    if regions.is_empty() {
        return Ok(None);
    }
    Ok(Some(NestedBag {
        slide_id: slide_id.clone(),
        label,
        regions,
    }))
}

/// Assembles bags for every slide with an assignment. Slides without regions
/// are excluded and their ids returned alongside the bags.
pub fn assemble_bags(
    manifests: &BTreeMap<String, Vec<TileRecord>>,
    assignments: &[RegionAssignment],
    embeddings: &BTreeMap<String, SlideEmbeddings>,
    labels: &BTreeMap<String, Grade>,
    mode: ScaleMode,
) -> Result<(Vec<NestedBag>, Vec<String>), EmbedError> {
    let mut bags = Vec::new();
    let mut excluded = Vec::new();
    for a in assignments {
        if a.regions.is_empty() {
            excluded.push(a.slide_id.clone());
            continue;
        }
        let label = *labels
            .get(&a.slide_id)
            .ok_or_else(|| EmbedError::MissingLabel(a.slide_id.clone()))?;
        let manifest = manifests.get(&a.slide_id).map(Vec::as_slice).unwrap_or(&[]);
        let emb = embeddings.get(&a.slide_id).ok_or_else(|| EmbedError::MissingScale {
            slide_id: a.slide_id.clone(),
            tile_id: a.regions[0].tile_ids[0],
            magnification: mode.scales()[0],
        })?;
        match assemble_bag(manifest, a, emb, mode, label)? {
            Some(b) => bags.push(b),
            None => excluded.push(a.slide_id.clone()),
        }
    }
    Ok((bags, excluded))
}
