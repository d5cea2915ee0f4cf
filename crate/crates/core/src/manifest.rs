//! Patch inventory: records, validation, and the line-delimited file format.
//!
//! File layout (UTF-8, `\n` line endings):
//!
//! ```text
//! {"classes":["HLC","CPC","DDC","RBL","CPT","DSE","PRD","PHY"]}
//! {"patch_id":"IMG_0001_r0_c0","source_image":"IMG_0001.JPG","site_code":"HWB","grid_row":0,"grid_col":0,"labels":[1,0,0,0,0,0,0,0],"split":"train"}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil;
use crate::schema::{LabelSchema, LabelVector, SchemaError, SITE_CODES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub patch_id: String,
    pub source_image: String,
    pub site_code: String,
    pub grid_row: u32,
    pub grid_col: u32,
    pub labels: LabelVector,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub schema: LabelSchema,
    pub records: Vec<PatchRecord>,
}

/// Parse failure in a line-delimited file. Line numbers are 1-based.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("missing header line")]
    MissingHeader,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    DuplicatePatchId,
    DuplicateGridCell,
    LabelLengthMismatch,
    AllZeroLabels,
    UnknownSite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub kind: IssueKind,
    pub patch_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {}", e.message)?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {}", w.message)?;
        }
        Ok(())
    }
}

/// Checks the manifest invariants. Never fails; problems are collected
/// into the returned report.
pub fn validate_manifest(m: &Manifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut ids: HashSet<&str> = HashSet::new();
    let mut cells: HashSet<(&str, u32, u32)> = HashSet::new();
    for r in &m.records {
        if !ids.insert(&r.patch_id) {
            report.errors.push(Issue {
                kind: IssueKind::DuplicatePatchId,
                patch_id: r.patch_id.clone(),
                message: format!("duplicate patch_id `{}`", r.patch_id),
            });
        }
        if !cells.insert((&r.source_image, r.grid_row, r.grid_col)) {
            report.errors.push(Issue {
                kind: IssueKind::DuplicateGridCell,
                patch_id: r.patch_id.clone(),
                message: format!(
                    "`{}` repeats grid cell (row {}, col {}) of `{}`",
                    r.patch_id, r.grid_row, r.grid_col, r.source_image
                ),
            });
        }
        if r.labels.len() != m.schema.size() {
            report.errors.push(Issue {
                kind: IssueKind::LabelLengthMismatch,
                patch_id: r.patch_id.clone(),
                message: format!(
                    "`{}` has {} labels, schema has {}",
                    r.patch_id,
                    r.labels.len(),
                    m.schema.size()
                ),
            });
        } else if r.labels.is_all_zero() {
            report.warnings.push(Issue {
                kind: IssueKind::AllZeroLabels,
                patch_id: r.patch_id.clone(),
                message: format!("`{}` has no positive label", r.patch_id),
            });
        }
        if !SITE_CODES.contains(&r.site_code.as_str()) {
            report.warnings.push(Issue {
                kind: IssueKind::UnknownSite,
                patch_id: r.patch_id.clone(),
                message: format!("`{}` has unlisted site code `{}`", r.patch_id, r.site_code),
            });
        }
    }
    report
}

#[derive(Serialize, Deserialize)]
struct Header {
    classes: Vec<String>,
}

impl Manifest {
    pub fn new(schema: LabelSchema) -> Self {
        Self {
            schema,
            records: Vec::new(),
        }
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn index_by_id(&self) -> HashMap<&str, &PatchRecord> {
        self.records
            .iter()
            .map(|r| (r.patch_id.as_str(), r))
            .collect()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.split).or_insert(0) += 1;
        }
        out
    }

    pub fn write_to(&self, w: &mut dyn Write) -> io::Result<()> {
        let header = Header {
            classes: self.schema.codes(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    /// Reads a manifest whose header must carry exactly `schema`'s class order.
    pub fn read_from<R: BufRead>(reader: R, schema: &LabelSchema) -> Result<Self, FormatError> {
        let mut lines = reader.lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                None => return Err(FormatError::MissingHeader),
                Some((_, line)) if line.as_ref().is_ok_and(|l| l.trim().is_empty()) => continue,
                Some((i, line)) => {
                    let line = line?;
                    break serde_json::from_str(&line).map_err(|e| FormatError::Malformed {
                        line: i + 1,
                        message: format!("bad header: {e}"),
                    })?;
                }
            }
        };
        schema.check_order(&header.classes)?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PatchRecord =
                serde_json::from_str(&line).map_err(|e| FormatError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        Ok(Self {
            schema: schema.clone(),
            records,
        })
    }

    pub fn load(path: &Path, schema: &LabelSchema) -> Result<Self, FormatError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(file), schema)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fsutil::write_atomic(path, |w| self.write_to(w))
    }
}
