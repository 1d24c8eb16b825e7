//! Dataset directory layout:
//!
//! ```text
//! manifest.jsonl        tile records of every slide
//! labels.jsonl          {"slide_id", "grade"}
//! splits.json           {"train": [...], "val": [...], "test": [...]}
//! embeddings/           <slide>.<400x|100x|25x>.nmge
//! ground_truth.jsonl    planted positive region and tiles per slide
//! annotations.jsonl     region grades for the test split
//! events.jsonl          {"slide_id", "event"}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_json, CliError, DataArgs};
use crate::embedstore::{
    assemble_bag, embedding_path, read_labels, write_annotations, write_embeddings, write_events, write_jsonl,
    write_labels, Grade, LabelRecord, NestedBag, ScaleMode, SlideEmbeddings, SlideEvent, Split, SynthDataset,
};
use crate::regiongrid::{define_regions, group_by_slide, read_manifest, write_manifest, RegionAssignment, RegionConfig, TileRecord};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub slide_id: String,
    pub split: Split,
    pub grade: Grade,
    pub positive_region: Option<usize>,
    pub positive_tiles: Vec<u64>,
}

/// Writes every artifact of a synthetic dataset; returns the relative paths written.
pub fn write_dataset(ds: &SynthDataset, dir: &Path, regions: &RegionConfig) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    let tiles: Vec<TileRecord> = ds.slides.iter().flat_map(|s| s.tiles.iter().cloned()).collect();
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&path, &tiles).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    written.push(MANIFEST_FILE.to_string());

    let labels: Vec<LabelRecord> = ds
        .slides
        .iter()
        .map(|s| LabelRecord {
            slide_id: s.slide_id.clone(),
            grade: s.grade,
        })
        .collect();
    write_labels(&dir.join(LABELS_FILE), &labels)?;
    written.push(LABELS_FILE.to_string());

    let splits: BTreeMap<&str, Vec<&str>> = Split::ALL
        .iter()
        .map(|&sp| (sp.name(), ds.split(sp).map(|s| s.slide_id.as_str()).collect()))
        .collect();
    write_json(&dir.join(SPLITS_FILE), &splits)?;
    written.push(SPLITS_FILE.to_string());

    let emb_dir = dir.join(EMBEDDINGS_DIR);
    fs::create_dir_all(&emb_dir).map_err(|e| CliError::Data(format!("{}: {e}", emb_dir.display())))?;
    for s in &ds.slides {
        for (&mag, matrix) in &s.embeddings.by_scale {
            write_embeddings(matrix, &embedding_path(&emb_dir, &s.slide_id, mag))?;
            written.push(format!("{EMBEDDINGS_DIR}/{}.{}.nmge", s.slide_id, mag.label()));
        }
    }

    let truth: Vec<GroundTruth> = ds
        .slides
        .iter()
        .map(|s| GroundTruth {
            slide_id: s.slide_id.clone(),
            split: s.split,
            grade: s.grade,
            positive_region: s.positive_region,
            positive_tiles: s.positive_tiles.iter().copied().collect(),
        })
        .collect();
    let path = dir.join(GROUND_TRUTH_FILE);
    write_jsonl(&path, &truth)?;
    written.push(GROUND_TRUTH_FILE.to_string());

    write_annotations(&dir.join(ANNOTATIONS_FILE), &ds.annotations(Split::Test, regions)?)?;
    written.push(ANNOTATIONS_FILE.to_string());

    let events: Vec<SlideEvent> = ds
        .slides
        .iter()
        .map(|s| SlideEvent {
            slide_id: s.slide_id.clone(),
            event: s.event,
        })
        .collect();
    write_events(&dir.join(EVENTS_FILE), &events)?;
    written.push(EVENTS_FILE.to_string());
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub manifest: PathBuf,
    pub embeddings_dir: PathBuf,
    pub labels: PathBuf,
    pub splits: Option<PathBuf>,
}

impl DatasetPaths {
    pub fn resolve(args: &DataArgs) -> Result<Self, CliError> {
        let pick = |explicit: &Option<PathBuf>, default: &str, flag: &str| -> Result<PathBuf, CliError> {
            match (explicit, &args.dataset) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(d)) => Ok(d.join(default)),
                (None, None) => Err(CliError::Usage(format!("pass --dataset or --{flag}"))),
            }
        };
        let splits = match (&args.splits, &args.dataset) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(d)) if d.join(SPLITS_FILE).exists() => Some(d.join(SPLITS_FILE)),
            _ => None,
        };
        Ok(Self {
            manifest: pick(&args.manifest, MANIFEST_FILE, "manifest")?,
            embeddings_dir: pick(&args.embeddings_dir, EMBEDDINGS_DIR, "embeddings-dir")?,
            labels: pick(&args.labels, LABELS_FILE, "labels")?,
            splits,
        })
    }

    /// The dataset's own annotations file, if present.
    pub fn default_side_file(args: &DataArgs, name: &str) -> Option<PathBuf> {
        args.dataset.as_ref().map(|d| d.join(name)).filter(|p| p.exists())
    }
}

/// A loaded dataset directory; embeddings are read lazily per slide.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub paths: DatasetPaths,
    pub tiles: BTreeMap<String, Vec<TileRecord>>,
    pub labels: BTreeMap<String, Grade>,
    pub splits: Option<BTreeMap<String, Vec<String>>>,
}

/// Bags of the requested slides plus what was needed to build them.
#[derive(Debug, Clone)]
pub struct LoadedBags {
    pub bags: Vec<NestedBag>,
    pub assignments: BTreeMap<String, RegionAssignment>,
    /// Slides with no usable region.
    pub excluded: Vec<String>,
}

impl Dataset {
    pub fn load(paths: DatasetPaths) -> Result<Self, CliError> {
        let tiles = group_by_slide(read_manifest(&paths.manifest)?);
        let labels = read_labels(&paths.labels)?;
        let splits = match &paths.splits {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                Some(serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        Ok(Self {
            paths,
            tiles,
            labels,
            splits,
        })
    }

    /// Slide ids of a split; `all` means every labeled slide in the manifest.
    pub fn split_ids(&self, name: &str) -> Result<Vec<String>, CliError> {
        if name == "all" {
            return Ok(self.tiles.keys().filter(|s| self.labels.contains_key(*s)).cloned().collect());
        }
        let splits = self
            .splits
            .as_ref()
            .ok_or_else(|| CliError::Data(format!("no splits file; cannot select split {name:?}")))?;
        splits
            .get(name)
            .cloned()
            .ok_or_else(|| CliError::Data(format!("split {name:?} not found in splits file")))
    }

    /// Defines regions, loads embeddings and assembles bags for `slide_ids`.
    /// Unlabeled slides are an error when `need_labels` is set and are
    /// otherwise given the LG label, which inference ignores.
    pub fn bags(
        &self,
        slide_ids: &[String],
        mode: ScaleMode,
        regions: &RegionConfig,
        need_labels: bool,
    ) -> Result<LoadedBags, CliError> {
        let unknown: Vec<&String> = slide_ids.iter().filter(|s| !self.tiles.contains_key(*s)).collect();
        if !unknown.is_empty() {
            return Err(CliError::Data(format!("slides not in manifest: {unknown:?}")));
        }
        let mut out = LoadedBags {
            bags: Vec::new(),
            assignments: BTreeMap::new(),
            excluded: Vec::new(),
        };
        for id in slide_ids {
            let label = match self.labels.get(id) {
                Some(&g) => g,
                None if need_labels => return Err(CliError::Data(format!("slide {id:?} has no label"))),
                None => Grade::Low,
            };
            let tiles = &self.tiles[id];
            let assignment = define_regions(tiles, regions)?;
            let embeddings = SlideEmbeddings::load(&self.paths.embeddings_dir, id, mode)?;
            match assemble_bag(tiles, &assignment, &embeddings, mode, label)? {
                Some(bag) => out.bags.push(bag),
                None => out.excluded.push(id.clone()),
            }
            out.assignments.insert(id.clone(), assignment);
        }
        Ok(out)
    }
}
