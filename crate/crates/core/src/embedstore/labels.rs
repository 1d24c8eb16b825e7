//! JSON-lines side files: slide labels, region annotations and follow-up events.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{EmbedError, Grade};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub slide_id: String,
    pub grade: Grade,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub slide_id: String,
    pub region_id: usize,
    pub grade: Grade,
}

/// A binary follow-up outcome (e.g. progression) for one slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEvent {
    pub slide_id: String,
    pub event: bool,
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EmbedError> {
    let file = File::open(path).map_err(|e| EmbedError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EmbedError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EmbedError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EmbedError> {
    let run = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for item in items {
            serde_json::to_writer(&mut out, item)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    };
    run().map_err(|e| EmbedError::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Grade>, EmbedError> {
    Ok(read_jsonl::<LabelRecord>(path)?
        .into_iter()
        .map(|r| (r.slide_id, r.grade))
        .collect())
}

pub fn write_labels(path: &Path, labels: &[LabelRecord]) -> Result<(), EmbedError> {
    write_jsonl(path, labels)
}

pub fn read_annotations(path: &Path) -> Result<Vec<RegionAnnotation>, EmbedError> {
    read_jsonl(path)
}

pub fn write_annotations(path: &Path, annotations: &[RegionAnnotation]) -> Result<(), EmbedError> {
    write_jsonl(path, annotations)
}

pub fn read_events(path: &Path) -> Result<Vec<SlideEvent>, EmbedError> {
    read_jsonl(path)
}

pub fn write_events(path: &Path, events: &[SlideEvent]) -> Result<(), EmbedError> {
    write_jsonl(path, events)
}
