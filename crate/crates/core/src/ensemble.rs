//! Probability fusion across models and the probability → label decision.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil;
use crate::manifest::FormatError;
use crate::schema::{LabelSchema, LabelVector};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("no member matrices to average")]
    NoMembers,
    #[error("member {member} has width {found}, expected {expected}")]
    WidthMismatch {
        member: usize,
        expected: usize,
        found: usize,
    },
    #[error("member {member} row ids differ from member 0: missing {missing:?}, unexpected {unexpected:?}")]
    RowMismatch {
        member: usize,
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("invalid probability matrix: {0}")]
    InvalidMatrix(String),
    #[error("decision threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
}

/// Per-patch class probabilities, one row per patch id.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    ids: Vec<String>,
    width: usize,
    values: Vec<f64>,
}

impl ProbabilityMatrix {
    pub fn new(ids: Vec<String>, width: usize, values: Vec<f64>) -> Result<Self, EnsembleError> {
        if width == 0 {
            return Err(EnsembleError::InvalidMatrix("width must be positive".into()));
        }
        if values.len() != ids.len() * width {
            return Err(EnsembleError::InvalidMatrix(format!(
                "{} values do not fill {} rows of width {width}",
                values.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(EnsembleError::InvalidMatrix(format!("duplicate row id `{dup}`")));
        }
        if let Some(i) = values.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(EnsembleError::InvalidMatrix(format!(
                "row `{}` class {} has probability {} outside [0, 1]",
                ids[i / width],
                i % width,
                values[i]
            )));
        }
        Ok(Self { ids, width, values })
    }

    pub fn from_rows(rows: Vec<(String, Vec<f64>)>) -> Result<Self, EnsembleError> {
        let width = rows.first().map_or(1, |(_, r)| r.len());
        if let Some((id, r)) = rows.iter().find(|(_, r)| r.len() != width) {
            return Err(EnsembleError::InvalidMatrix(format!(
                "row `{id}` has width {}, expected {width}",
                r.len()
            )));
        }
        let (ids, vals): (Vec<String>, Vec<Vec<f64>>) = rows.into_iter().unzip();
        Self::new(ids, width, vals.concat())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.values.chunks_exact(self.width))
    }
}

/// Pairwise (cascade) summation in slice order.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Cell-wise mean of the member matrices, rows aligned by patch id and
/// emitted in the first member's order.
///
/// The cell values are sorted before a pairwise sum, so the result is
/// bit-identical under any reordering of `members`. The mean is clamped to
/// the members' [min, max] to absorb rounding.
pub fn ensemble_average(members: &[ProbabilityMatrix]) -> Result<ProbabilityMatrix, EnsembleError> {
    let first = members.first().ok_or(EnsembleError::NoMembers)?;
    let width = first.width;
    let reference: BTreeSet<&str> = first.ids.iter().map(String::as_str).collect();
    let mut lookups = Vec::with_capacity(members.len());
    for (member, m) in members.iter().enumerate() {
        if m.width != width {
            return Err(EnsembleError::WidthMismatch {
                member,
                expected: width,
                found: m.width,
            });
        }
        let index: HashMap<&str, usize> = m.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let missing: Vec<String> = reference
            .iter()
            .filter(|id| !index.contains_key(*id))
            .map(|s| s.to_string())
            .collect();
        let mut unexpected: Vec<String> = m
            .ids
            .iter()
            .filter(|id| !reference.contains(id.as_str()))
            .cloned()
            .collect();
        unexpected.sort();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(EnsembleError::RowMismatch {
                member,
                missing,
                unexpected,
            });
        }
        lookups.push(index);
    }

    let k = members.len() as f64;
    let mut values = Vec::with_capacity(first.values.len());
    let mut cell = vec![0.0; members.len()];
    for id in &first.ids {
        let rows: Vec<&[f64]> = members
            .iter()
            .zip(&lookups)
            .map(|(m, idx)| m.row(idx[id.as_str()]))
            .collect();
        for c in 0..width {
            for (slot, row) in cell.iter_mut().zip(&rows) {
                *slot = row[c];
            }
            cell.sort_by(f64::total_cmp);
            let mean = pairwise_sum(&cell) / k;
            values.push(mean.clamp(cell[0], cell[cell.len() - 1]));
        }
    }
    Ok(ProbabilityMatrix {
        ids: first.ids.clone(),
        width,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    /// A class is predicted when its probability is at least this value.
    pub threshold: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl DecisionConfig {
    pub fn new(threshold: f64) -> Result<Self, EnsembleError> {
        let cfg = Self { threshold };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.threshold > 0.0 && self.threshold < 1.0 {
            Ok(())
        } else {
            Err(EnsembleError::InvalidThreshold(self.threshold))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub patch_id: String,
    pub probs: Vec<f64>,
    pub labels: LabelVector,
}

pub fn threshold_decide(probs: &ProbabilityMatrix, cfg: &DecisionConfig) -> Result<Vec<PredictionRecord>, EnsembleError> {
    cfg.validate()?;
    Ok(probs
        .iter()
        .map(|(id, row)| PredictionRecord {
            patch_id: id.to_string(),
            probs: row.to_vec(),
            labels: LabelVector::from_bools(&row.iter().map(|&p| p >= cfg.threshold).collect::<Vec<_>>()),
        })
        .collect())
}

/// Contents of a prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub threshold: f64,
    pub records: Vec<PredictionRecord>,
}

#[derive(Serialize, Deserialize)]
struct PredictionHeader {
    classes: Vec<String>,
    threshold: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    patch_id: String,
    probs: Vec<f64>,
    labels: LabelVector,
}

impl PredictionSet {
    pub fn new(threshold: f64, records: Vec<PredictionRecord>) -> Self {
        Self { threshold, records }
    }

    pub fn matrix(&self) -> Result<ProbabilityMatrix, EnsembleError> {
        ProbabilityMatrix::from_rows(
            self.records
                .iter()
                .map(|r| (r.patch_id.clone(), r.probs.clone()))
                .collect(),
        )
    }

    /// Header line with class order and threshold, then one record per
    /// line with probabilities at six decimals.
    pub fn write_to(&self, w: &mut dyn Write, schema: &LabelSchema) -> io::Result<()> {
        let header = PredictionHeader {
            classes: schema.codes(),
            threshold: self.threshold,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            if r.probs.len() != schema.size() || r.labels.len() != schema.size() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("record `{}` does not have {} classes", r.patch_id, schema.size()),
                ));
            }
            write!(w, "{{\"patch_id\":{},\"probs\":[", serde_json::to_string(&r.patch_id)?)?;
            for (i, p) in r.probs.iter().enumerate() {
                if !(0.0..=1.0).contains(p) {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidInput,
                        format!("record `{}` has probability {p} outside [0, 1]", r.patch_id),
                    ));
                }
                if i > 0 {
                    w.write_all(b",")?;
                }
                write!(w, "{p:.6}")?;
            }
            writeln!(w, "],\"labels\":{}}}", r.labels)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R, schema: &LabelSchema) -> Result<Self, FormatError> {
        let mut header: Option<PredictionHeader> = None;
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let malformed = |message: String| FormatError::Malformed { line: lineno, message };
            if line.trim().is_empty() {
                continue;
            }
            if header.is_none() {
                let h: PredictionHeader =
                    serde_json::from_str(&line).map_err(|e| malformed(format!("bad header: {e}")))?;
                schema.check_order(&h.classes)?;
                if !(h.threshold > 0.0 && h.threshold < 1.0) {
                    return Err(malformed(format!("threshold {} outside (0, 1)", h.threshold)));
                }
                header = Some(h);
                continue;
            }
            let rec: PredictionLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            if rec.probs.len() != schema.size() || rec.labels.len() != schema.size() {
                return Err(malformed(format!(
                    "expected {} probabilities and labels, found {} and {}",
                    schema.size(),
                    rec.probs.len(),
                    rec.labels.len()
                )));
            }
            if let Some(p) = rec.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(malformed(format!("probability {p} outside [0, 1]")));
            }
            if !ids.insert(rec.patch_id.clone()) {
                return Err(malformed(format!("duplicate patch_id `{}`", rec.patch_id)));
            }
            records.push(PredictionRecord {
                patch_id: rec.patch_id,
                probs: rec.probs,
                labels: rec.labels,
            });
        }
        let header = header.ok_or(FormatError::MissingHeader)?;
        Ok(Self {
            threshold: header.threshold,
            records,
        })
    }

    pub fn load(path: &Path, schema: &LabelSchema) -> Result<Self, FormatError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(file), schema)
    }

    pub fn save(&self, path: &Path, schema: &LabelSchema) -> io::Result<()> {
        fsutil::write_atomic(path, |w| self.write_to(w, schema))
    }

    pub fn to_bytes(&self, schema: &LabelSchema) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, schema)?;
        Ok(buf)
    }
}
