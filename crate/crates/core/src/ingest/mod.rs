//! From survey images to a tiled, labeled manifest.

mod split;
mod tiling;

pub use split::{assign_split, train_unit_count, SplitConfig, SplitGranularity};
pub use tiling::{crop_patches, tile_grid, TileSlot, TilingConfig};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::fsutil::StagedDir;
use crate::manifest::{Manifest, PatchRecord, Split};
use crate::schema::{LabelSchema, LabelVector, SchemaError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid tiling: {0}")]
    InvalidTiling(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("cannot decode image {path}: {message}")]
    Undecodable { path: PathBuf, message: String },
    #[error("duplicate source stem `{0}`")]
    DuplicateStem(String),
    #[error("{path}: labels for tile (row {row}, col {col}) but the image yields no such tile")]
    NoSuchTile { path: PathBuf, row: u32, col: u32 },
    #[error("label sheet line {line}: {message}")]
    LabelSheet { line: u64, message: String },
    #[error("{context}: {source}")]
    Schema {
        context: String,
        source: SchemaError,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

/// One survey image with its annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSource {
    pub path: PathBuf,
    pub site_code: String,
    /// Broadcast to every tile unless overridden below.
    pub image_labels: Vec<String>,
    /// Per-tile label sets keyed by (row, col).
    pub patch_labels: BTreeMap<(u32, u32), Vec<String>>,
}

impl LabeledSource {
    pub fn new(path: impl Into<PathBuf>, site_code: &str, labels: &[&str]) -> Self {
        Self {
            path: path.into(),
            site_code: site_code.to_string(),
            image_labels: labels.iter().map(|s| s.to_string()).collect(),
            patch_labels: BTreeMap::new(),
        }
    }

    pub fn stem(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    fn file_name(&self) -> String {
        self.path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn patch_id(stem: &str, row: u32, col: u32) -> String {
    format!("{stem}_r{row}_c{col}")
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, IngestError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| IngestError::Undecodable {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn image_dims(path: &Path) -> Result<(u32, u32), IngestError> {
    image::image_dimensions(path).map_err(|e| IngestError::Undecodable {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Builds the manifest for `sources` without touching pixel data beyond
/// reading image headers. Records come out ordered by (stem, row, col);
/// every record starts unassigned.
pub fn build_manifest(
    sources: &[LabeledSource],
    tiling: &TilingConfig,
    schema: &LabelSchema,
) -> Result<Manifest, IngestError> {
    tiling.validate()?;
    let mut stems = HashSet::new();
    for s in sources {
        if !stems.insert(s.stem()) {
            return Err(IngestError::DuplicateStem(s.stem()));
        }
    }
    let mut order: Vec<&LabeledSource> = sources.iter().collect();
    order.sort_by_key(|s| s.stem());

    let mut manifest = Manifest::new(schema.clone());
    for src in order {
        let ctx = || src.path.display().to_string();
        let image_labels = schema
            .encode(&src.image_labels)
            .map_err(|source| IngestError::Schema { context: ctx(), source })?;
        let mut overrides: HashMap<(u32, u32), LabelVector> = HashMap::new();
        for (&cell, codes) in &src.patch_labels {
            let v = schema
                .encode(codes)
                .map_err(|source| IngestError::Schema { context: ctx(), source })?;
            overrides.insert(cell, v);
        }
        let (w, h) = image_dims(&src.path)?;
        let slots = tile_grid(w, h, tiling)?;
        let produced: HashSet<(u32, u32)> = slots.iter().map(|s| (s.row, s.col)).collect();
        if let Some(&(row, col)) = src.patch_labels.keys().find(|c| !produced.contains(c)) {
            return Err(IngestError::NoSuchTile {
                path: src.path.clone(),
                row,
                col,
            });
        }
        let site = if src.site_code.trim().is_empty() {
            "UNK".to_string()
        } else {
            src.site_code.trim().to_string()
        };
        for slot in slots {
            let labels = overrides
                .get(&(slot.row, slot.col))
                .cloned()
                .unwrap_or_else(|| image_labels.clone());
            manifest.records.push(PatchRecord {
                patch_id: patch_id(&src.stem(), slot.row, slot.col),
                source_image: src.file_name(),
                site_code: site.clone(),
                grid_row: slot.row,
                grid_col: slot.col,
                labels,
                split: Split::Unassigned,
            });
        }
    }
    Ok(manifest)
}

/// Crops every source and writes `<patch_id>.png` files into `dir`.
/// Images are processed in parallel; file names are fixed by the grid,
/// so the output does not depend on scheduling.
pub fn write_patches(sources: &[LabeledSource], tiling: &TilingConfig, dir: &Path) -> Result<usize, IngestError> {
    fs::create_dir_all(dir).map_err(|source| IngestError::Io {
        context: dir.display().to_string(),
        source,
    })?;
    let counts = sources
        .par_iter()
        .map(|src| {
            let img = load_rgb(&src.path)?;
            let tiles = crop_patches(&img, tiling)?;
            for (slot, tile) in &tiles {
                let path = dir.join(format!("{}.png", patch_id(&src.stem(), slot.row, slot.col)));
                tile.save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| IngestError::Io {
                        context: path.display().to_string(),
                        source: std::io::Error::other(e),
                    })?;
            }
            Ok(tiles.len())
        })
        .collect::<Result<Vec<usize>, IngestError>>()?;
    Ok(counts.into_iter().sum())
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PATCH_DIR: &str = "patches";

/// Full ingest into `out_dir`: `manifest.jsonl` plus `patches/`. The
/// directory is assembled under a temporary name and only moved into place
/// once everything has been written.
pub fn ingest_to_dir(
    sources: &[LabeledSource],
    tiling: &TilingConfig,
    schema: &LabelSchema,
    out_dir: &Path,
) -> Result<Manifest, IngestError> {
    let manifest = build_manifest(sources, tiling, schema)?;
    let io_err = |context: &Path| {
        let context = context.display().to_string();
        move |source| IngestError::Io { context, source }
    };
    let staged = StagedDir::new(out_dir).map_err(io_err(out_dir))?;
    write_patches(sources, tiling, &staged.path().join(PATCH_DIR))?;
    manifest
        .save(&staged.path().join(MANIFEST_FILE))
        .map_err(io_err(out_dir))?;
    staged.commit().map_err(io_err(out_dir))?;
    Ok(manifest)
}

#[derive(Debug, Deserialize)]
struct SheetRow {
    image: String,
    #[serde(default)]
    site: String,
    #[serde(default)]
    labels: String,
    #[serde(default)]
    row: Option<u32>,
    #[serde(default)]
    col: Option<u32>,
}

/// Reads a CSV label sheet with columns `image,site,labels[,row,col]`.
///
/// A line without `row`/`col` labels the whole image; a line with both
/// labels one tile. `labels` is a `;`-separated code list and may be empty.
/// Image paths are resolved against `images_dir`.
pub fn read_label_sheet(
    path: &Path,
    images_dir: &Path,
    schema: &LabelSchema,
) -> Result<Vec<LabeledSource>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| IngestError::Io {
            context: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
    let mut sources: BTreeMap<String, LabeledSource> = BTreeMap::new();
    let mut whole_image_seen: HashSet<String> = HashSet::new();
    let headers = reader
        .headers()
        .map_err(|e| IngestError::LabelSheet {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for result in reader.records() {
        let sheet_err = |line: u64, message: String| IngestError::LabelSheet { line, message };
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            sheet_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: SheetRow = record
            .deserialize(Some(&headers))
            .map_err(|e| sheet_err(line, e.to_string()))?;
        let codes: Vec<String> = row
            .labels
            .split([';', ','])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        schema
            .encode(&codes)
            .map_err(|e| sheet_err(line, e.to_string()))?;
        let entry = sources.entry(row.image.clone()).or_insert_with(|| LabeledSource {
            path: images_dir.join(&row.image),
            site_code: row.site.clone(),
            image_labels: Vec::new(),
            patch_labels: BTreeMap::new(),
        });
        if !row.site.is_empty() && entry.site_code != row.site {
            if entry.site_code.is_empty() {
                entry.site_code = row.site.clone();
            } else {
                return Err(sheet_err(
                    line,
                    format!("site `{}` conflicts with `{}` for {}", row.site, entry.site_code, row.image),
                ));
            }
        }
        match (row.row, row.col) {
            (None, None) => {
                if !whole_image_seen.insert(row.image.clone()) {
                    return Err(sheet_err(line, format!("{} labeled twice", row.image)));
                }
                entry.image_labels = codes;
            }
            (Some(r), Some(c)) => {
                if entry.patch_labels.insert((r, c), codes).is_some() {
                    return Err(sheet_err(
                        line,
                        format!("{} tile (row {r}, col {c}) labeled twice", row.image),
                    ));
                }
            }
            _ => return Err(sheet_err(line, "row and col must be given together".into())),
        }
    }
    Ok(sources.into_values().collect())
}
