//! Synthetic slides with planted positive regions.
//!
//! Each slide is laid out as a row of well-separated tile blobs, one per
//! region, plus a few isolated stray tiles that region definition discards.
//! Low-grade slides draw every embedding from N(0, I). High-grade slides
//! carry one designated region in which a fraction of tiles are drawn from
//! N(mu * u, I) for a fixed unit direction u, at every magnification.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use ndarray::Array1;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    assemble_bag, EmbedError, EmbeddingMatrix, Grade, Magnification, NestedBag, RegionAnnotation, ScaleMode, SlideEmbeddings,
};
use crate::regiongrid::{define_regions, RegionConfig, TileRecord, TissueClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Slides per split: train, val, test.
    pub n_slides: [usize; 3],
    /// Fraction of high-grade slides per split; low-grade takes the rest.
    pub hg_fraction: [f64; 3],
    /// Inclusive range of regions per slide.
    pub regions_per_slide: [usize; 2],
    /// Inclusive range of tiles per region.
    pub tiles_per_region: [usize; 2],
    /// Inclusive range of isolated single tiles per slide.
    pub stray_tiles: [usize; 2],
    pub d_f: usize,
    pub mu_pos: f64,
    pub p_pos: f64,
    /// Follow-up event probability for low- and high-grade slides.
    pub event_rate: [f64; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: [220, 30, 50],
            hg_fraction: [96.0 / 220.0, 13.0 / 30.0, 22.0 / 50.0],
            regions_per_slide: [2, 8],
            tiles_per_region: [12, 60],
            stray_tiles: [0, 3],
            d_f: 128,
            mu_pos: 1.5,
            p_pos: 0.6,
            event_rate: [0.1, 0.4],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |m: String| Err(EmbedError::InvalidSynthConfig(m));
        for (i, split) in Split::ALL.iter().enumerate() {
            let f = self.hg_fraction[i];
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{split} hg fraction {f} outside [0, 1]"));
            }
            if self.n_slides[i] == 0 {
                return bad(format!("{split} split is empty"));
            }
            let n_hg = self.hg_count(*split);
            if n_hg == 0 || n_hg == self.n_slides[i] {
                return bad(format!("{split} split would contain a single grade"));
            }
        }
        for (name, r) in [
            ("regions_per_slide", self.regions_per_slide),
            ("tiles_per_region", self.tiles_per_region),
            ("stray_tiles", self.stray_tiles),
        ] {
            if r[0] > r[1] {
                return bad(format!("{name} range {r:?} is empty"));
            }
        }
        if self.regions_per_slide[0] == 0 || self.tiles_per_region[0] == 0 {
            return bad("every slide needs at least one non-empty region".into());
        }
        if self.d_f == 0 {
            return bad("d_f must be positive".into());
        }
        if !(self.p_pos > 0.0 && self.p_pos <= 1.0) {
            return bad(format!("p_pos {} outside (0, 1]", self.p_pos));
        }
        if !self.mu_pos.is_finite() {
            return bad("mu_pos must be finite".into());
        }
        if self.event_rate.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("event rates must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn hg_count(&self, split: Split) -> usize {
        let i = split as usize;
        (self.n_slides[i] as f64 * self.hg_fraction[i]).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SynthSlide {
    pub slide_id: String,
    pub split: Split,
    pub grade: Grade,
    pub tiles: Vec<TileRecord>,
    pub embeddings: SlideEmbeddings,
    /// Planted regions as tile id groups; index equals the region id that
    /// region definition assigns when thresholds admit every region.
    pub planted_regions: Vec<Vec<u64>>,
    pub positive_region: Option<usize>,
    pub positive_tiles: BTreeSet<u64>,
    pub event: bool,
}

impl SynthSlide {
    pub fn is_positive(&self, tile_id: u64) -> bool {
        self.positive_tiles.contains(&tile_id)
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// Direction of the positive-tile mean shift.
    pub direction: Vec<f64>,
    pub slides: Vec<SynthSlide>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthSlide> {
        self.slides.iter().filter(move |s| s.split == split)
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SynthSlide> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    /// Runs region definition and bag assembly on one split.
    pub fn bags(&self, split: Split, mode: ScaleMode, regions: &RegionConfig) -> Result<Vec<NestedBag>, EmbedError> {
        let mut out = Vec::new();
        for s in self.split(split) {
            let assignment = define_regions(&s.tiles, regions).map_err(|e| EmbedError::InvalidSynthConfig(e.to_string()))?;
            if let Some(bag) = assemble_bag(&s.tiles, &assignment, &s.embeddings, mode, s.grade)? {
                out.push(bag);
            }
        }
        Ok(out)
    }
}

impl SynthDataset {
    /// Region-level ground truth for one split: every region that region
    /// definition produces, HG iff the slide is HG and the region holds
    /// positive tiles.
    pub fn annotations(&self, split: Split, regions: &RegionConfig) -> Result<Vec<RegionAnnotation>, EmbedError> {
        let mut out = Vec::new();
        for s in self.split(split) {
            let assignment = define_regions(&s.tiles, regions).map_err(|e| EmbedError::InvalidSynthConfig(e.to_string()))?;
            for r in &assignment.regions {
                let positive = s.grade.is_high() && r.tile_ids.iter().any(|&t| s.is_positive(t));
                out.push(RegionAnnotation {
                    slide_id: s.slide_id.clone(),
                    region_id: r.region_id,
                    grade: if positive { Grade::High } else { Grade::Low },
                });
            }
        }
        Ok(out)
    }
}

/// Grows a connected blob of `n` cells by attaching random 8-neighbours.
fn grow_blob(n: usize, rng: &mut ChaCha8Rng) -> Vec<(i64, i64)> {
    let mut cells = vec![(0i64, 0i64)];
    let mut occupied: HashSet<(i64, i64)> = cells.iter().copied().collect();
    while cells.len() < n {
        let (x, y) = cells[rng.random_range(0..cells.len())];
        let dx = rng.random_range(-1..=1);
        let dy = rng.random_range(-1..=1);
        let c = (x + dx, y + dy);
        if occupied.insert(c) {
            cells.push(c);
        }
    }
    cells
}

fn unit_direction(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.dot(&v).sqrt();
    (v / norm).to_vec()
}

fn generate_slide(
    config: &SynthConfig,
    slide_id: String,
    split: Split,
    grade: Grade,
    direction: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<SynthSlide, EmbedError> {
    let k = rng.random_range(config.regions_per_slide[0]..=config.regions_per_slide[1]);
    let mut tiles = Vec::new();
    let mut planted_regions = Vec::with_capacity(k);
    let mut next_id = 0u64;
    let mut cursor = 0i64;
    for _ in 0..k {
        let n = rng.random_range(config.tiles_per_region[0]..=config.tiles_per_region[1]);
        let cells = grow_blob(n, rng);
        let min_x = cells.iter().map(|c| c.0).min().unwrap();
        let min_y = cells.iter().map(|c| c.1).min().unwrap();
        let max_x = cells.iter().map(|c| c.0).max().unwrap();
        let mut ids = Vec::with_capacity(n);
        for (x, y) in cells {
            tiles.push(TileRecord {
                slide_id: slide_id.clone(),
                tile_id: next_id,
                gx: cursor + x - min_x,
                gy: y - min_y,
                tissue_class: Some(TissueClass::Urothelium),
            });
            ids.push(next_id);
            next_id += 1;
        }
        planted_regions.push(ids);
        // Two empty columns keep neighbouring blobs apart under 8-connectivity.
        cursor += max_x - min_x + 3;
    }
    let strays = rng.random_range(config.stray_tiles[0]..=config.stray_tiles[1]);
    for j in 0..strays {
        tiles.push(TileRecord {
            slide_id: slide_id.clone(),
            tile_id: next_id,
            gx: 3 * j as i64,
            gy: -3,
            tissue_class: Some(TissueClass::Urothelium),
        });
        next_id += 1;
    }

    let mut positive_tiles = BTreeSet::new();
    let positive_region = grade.is_high().then(|| rng.random_range(0..k));
    if let Some(r) = positive_region {
        let members = &planted_regions[r];
        let n_pos = ((config.p_pos * members.len() as f64).round() as usize).clamp(1, members.len());
        for i in index::sample(rng, members.len(), n_pos) {
            positive_tiles.insert(members[i]);
        }
    }

    let mut embeddings = SlideEmbeddings::new(slide_id.clone());
    for mag in Magnification::ALL {
        let rows = tiles.iter().map(|t| {
            let shift = if positive_tiles.contains(&t.tile_id) { config.mu_pos } else { 0.0 };
            let row: Vec<f32> = direction
                .iter()
                .map(|&u| (rng.sample::<f64, _>(StandardNormal) + shift * u) as f32)
                .collect();
            (t.tile_id, row)
        });
        let rows: Vec<_> = rows.collect();
        embeddings.insert(EmbeddingMatrix::from_rows(slide_id.clone(), mag, config.d_f, rows)?);
    }
    let event = rng.random::<f64>() < config.event_rate[grade.index()];

    Ok(SynthSlide {
        slide_id,
        split,
        grade,
        tiles,
        embeddings,
        planted_regions,
        positive_region,
        positive_tiles,
        event,
    })
}

/// Generates a full train/val/test dataset. Deterministic in `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset, EmbedError> {
    config.validate()?;
    let mut layout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let direction = unit_direction(config.d_f, &mut layout_rng);

    let mut slides = Vec::new();
    let mut slide_index = 0u64;
    for split in Split::ALL {
        let n = config.n_slides[split as usize];
        let n_hg = config.hg_count(split);
        let mut grades: Vec<Grade> = (0..n).map(|i| if i < n_hg { Grade::High } else { Grade::Low }).collect();
        grades.shuffle(&mut layout_rng);
        for (i, grade) in grades.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(slide_index + 1);
            slide_index += 1;
            let slide_id = format!("{}-{i:03}", split.name());
            slides.push(generate_slide(config, slide_id, split, grade, &direction, &mut rng)?);
        }
    }
    Ok(SynthDataset {
        config: config.clone(),
        direction,
        slides,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regiongrid::extract_blobs;

    fn small() -> SynthConfig {
        SynthConfig {
            n_slides: [20, 6, 8],
            hg_fraction: [0.5, 0.5, 0.5],
            d_f: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_split_sizes_and_grades() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.n_slides.iter().sum::<usize>(), 300);
        assert_eq!(cfg.hg_count(Split::Train), 96);
        assert_eq!(cfg.hg_count(Split::Val), 13);
        assert_eq!(cfg.hg_count(Split::Test), 22);
    }

    #[test]
    fn label_counts_match_config() {
        let cfg = small();
        let ds = synth_generate(&cfg).unwrap();
        for split in Split::ALL {
            let slides: Vec<_> = ds.split(split).collect();
            assert_eq!(slides.len(), cfg.n_slides[split as usize]);
            let hg = slides.iter().filter(|s| s.grade.is_high()).count();
            assert_eq!(hg, cfg.hg_count(split));
        }
    }

    #[test]
    fn positives_only_in_high_grade() {
        let ds = synth_generate(&small()).unwrap();
        for s in &ds.slides {
            match s.grade {
                Grade::Low => {
                    assert!(s.positive_tiles.is_empty());
                    assert!(s.positive_region.is_none());
                }
                Grade::High => {
                    let r = s.positive_region.unwrap();
                    assert!(!s.positive_tiles.is_empty());
                    assert!(s.positive_tiles.iter().all(|t| s.planted_regions[r].contains(t)));
                }
            }
        }
    }

    #[test]
    fn planted_regions_are_separate_blobs() {
        let ds = synth_generate(&small()).unwrap();
        for s in &ds.slides {
            let blobs = extract_blobs(&s.tiles).unwrap();
            let big: Vec<_> = blobs.iter().filter(|b| b.len() > 1).collect();
            assert_eq!(big.len(), s.planted_regions.len(), "{}", s.slide_id);
            for (b, planted) in big.iter().zip(&s.planted_regions) {
                assert_eq!(&b.tile_ids(), planted);
            }
        }
    }

    #[test]
    fn regions_recovered_by_region_definition() {
        let ds = synth_generate(&small()).unwrap();
        for s in &ds.slides {
            let a = define_regions(&s.tiles, &RegionConfig::default()).unwrap();
            let got: Vec<_> = a.regions.iter().map(|r| r.tile_ids.clone()).collect();
            assert_eq!(got, s.planted_regions);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        for (x, y) in a.slides.iter().zip(&b.slides) {
            assert_eq!(x.tiles, y.tiles);
            assert_eq!(x.positive_tiles, y.positive_tiles);
            for mag in Magnification::ALL {
                assert_eq!(x.embeddings.by_scale[&mag], y.embeddings.by_scale[&mag]);
            }
        }
    }

    #[test]
    fn zero_shift_gives_identical_distributions() {
        let cfg = SynthConfig {
            mu_pos: 0.0,
            ..small()
        };
        let ds = synth_generate(&cfg).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for s in &ds.slides {
            let m = &s.embeddings.by_scale[&Magnification::X400];
            for &t in m.tile_ids() {
                let proj: f64 = m.row(t).unwrap().iter().zip(&ds.direction).map(|(&a, &u)| a as f64 * u).sum();
                if s.is_positive(t) {
                    pos.push(proj);
                } else {
                    neg.push(proj);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // projections are N(0, 1) either way; the means differ only by sampling noise
        assert!((mean(&pos) - mean(&neg)).abs() < 0.2, "{} vs {}", mean(&pos), mean(&neg));
    }

    #[test]
    fn single_grade_split_refused() {
        let cfg = SynthConfig {
            hg_fraction: [0.0, 0.5, 0.5],
            ..small()
        };
        assert!(matches!(synth_generate(&cfg), Err(EmbedError::InvalidSynthConfig(_))));
    }

    #[test]
    fn shift_moves_positive_tiles() {
        let cfg = SynthConfig {
            mu_pos: 3.0,
            ..small()
        };
        let ds = synth_generate(&cfg).unwrap();
        let s = ds.slides.iter().find(|s| s.grade.is_high()).unwrap();
        let m = &s.embeddings.by_scale[&Magnification::X25];
        let proj = |t: u64| -> f64 { m.row(t).unwrap().iter().zip(&ds.direction).map(|(&a, &u)| a as f64 * u).sum() };
        let pos: f64 = s.positive_tiles.iter().map(|&t| proj(t)).sum::<f64>() / s.positive_tiles.len() as f64;
        assert!(pos > 1.5, "mean positive projection {pos}");
    }
}
