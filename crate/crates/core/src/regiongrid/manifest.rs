//! Tile manifest: one JSON object per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use super::TileRecord;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<TileRecord>, ManifestError> {
    let mut tiles = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ManifestError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let tile: TileRecord = serde_json::from_str(&line).map_err(|e| ManifestError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        tiles.push(tile);
    }
    Ok(tiles)
}

pub fn read_manifest(path: &Path) -> Result<Vec<TileRecord>, ManifestError> {
    let file = File::open(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(BufReader::new(file))
}

pub fn write_manifest(path: &Path, tiles: &[TileRecord]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in tiles {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Groups tiles by slide; slides come out sorted by id.
pub fn group_by_slide(tiles: Vec<TileRecord>) -> BTreeMap<String, Vec<TileRecord>> {
    let mut by_slide: BTreeMap<String, Vec<TileRecord>> = BTreeMap::new();
    for t in tiles {
        by_slide.entry(t.slide_id.clone()).or_default().push(t);
    }
    by_slide
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regiongrid::TissueClass;

    #[test]
    fn parses_lines_and_optional_class() {
        let text = r#"{"slide_id":"a","tile_id":0,"gx":1,"gy":2}

{"slide_id":"a","tile_id":1,"gx":2,"gy":2,"tissue_class":"lamina propria"}
"#;
        let tiles = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(tiles.len(), 2);
        assert_eq!(tiles[0].tissue_class, None);
        assert_eq!(tiles[1].tissue_class, Some(TissueClass::LaminaPropria));
    }

    #[test]
    fn reports_line_number() {
        let text = "{\"slide_id\":\"a\",\"tile_id\":0,\"gx\":1,\"gy\":2}\n{\"slide_id\":\"a\",\"gx\":1}\n";
        match parse_manifest(text.as_bytes()) {
            Err(ManifestError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
