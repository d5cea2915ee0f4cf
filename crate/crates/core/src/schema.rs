//! Class taxonomy and multi-hot label vectors.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("unknown class code `{0}`")]
    UnknownCode(String),
    #[error("label vector has length {actual}, schema has {expected} classes")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("label value {value} at position {position} is not 0 or 1")]
    NonBinary { position: usize, value: i64 },
    #[error("class code `{0}` must be three uppercase ASCII letters")]
    BadCode(String),
    #[error("duplicate class code `{0}`")]
    DuplicateCode(String),
    #[error("class order {found:?} does not match schema order {expected:?}")]
    OrderMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
}

/// One entry of the taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub code: String,
    pub full_name: String,
}

/// Ordered class taxonomy. The order fixes the column layout of every
/// label vector, probability matrix and report produced by the toolkit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    classes: Vec<ClassInfo>,
}

const CORAL_CLASSES: [(&str, &str); 8] = [
    ("HLC", "healthy coral"),
    ("CPC", "compromised coral"),
    ("DDC", "dead coral"),
    ("RBL", "rubble"),
    ("CPT", "competition"),
    ("DSE", "disease"),
    ("PRD", "predation"),
    ("PHY", "physical issues"),
];

/// Dive-site codes of the Koh Tao survey. Anything else is accepted but
/// flagged by manifest validation; `UNK` marks an unknown site.
pub const SITE_CODES: [&str; 10] = [
    "HWB", "AOM", "TTB", "ALK", "HNM", "SKI", "TCB", "CBK", "SWP", "UNK",
];

impl LabelSchema {
    /// The eight-class coral condition taxonomy in canonical order.
    pub fn coral() -> Self {
        Self {
            classes: CORAL_CLASSES
                .iter()
                .map(|(code, name)| ClassInfo {
                    code: (*code).to_string(),
                    full_name: (*name).to_string(),
                })
                .collect(),
        }
    }

    pub fn new(classes: Vec<ClassInfo>) -> Result<Self, SchemaError> {
        let mut seen = BTreeSet::new();
        for class in &classes {
            let ok = class.code.len() == 3 && class.code.bytes().all(|b| b.is_ascii_uppercase());
            if !ok {
                return Err(SchemaError::BadCode(class.code.clone()));
            }
            if !seen.insert(class.code.as_str()) {
                return Err(SchemaError::DuplicateCode(class.code.clone()));
            }
        }
        Ok(Self { classes })
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn codes(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.code.clone()).collect()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.code == code)
    }

    /// Rejects a class-code order read from a file header unless it is
    /// exactly this schema's order. Columns are never silently reordered.
    pub fn check_order<S: AsRef<str>>(&self, found: &[S]) -> Result<(), SchemaError> {
        let same = found.len() == self.classes.len()
            && found
                .iter()
                .zip(&self.classes)
                .all(|(f, c)| f.as_ref() == c.code);
        if same {
            Ok(())
        } else {
            Err(SchemaError::OrderMismatch {
                expected: self.codes(),
                found: found.iter().map(|s| s.as_ref().to_string()).collect(),
            })
        }
    }

    pub fn encode<S: AsRef<str>>(&self, codes: &[S]) -> Result<LabelVector, SchemaError> {
        let mut flags = vec![0u8; self.size()];
        for code in codes {
            let code = code.as_ref();
            let idx = self
                .index_of(code)
                .ok_or_else(|| SchemaError::UnknownCode(code.to_string()))?;
            flags[idx] = 1;
        }
        Ok(LabelVector(flags))
    }

    /// Parses a `;`- or `,`-separated code list such as `"CPC;DSE"`.
    pub fn encode_str(&self, codes: &str) -> Result<LabelVector, SchemaError> {
        let parts: Vec<&str> = codes
            .split([';', ','])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        self.encode(&parts)
    }

    pub fn decode(&self, vector: &LabelVector) -> Result<BTreeSet<String>, SchemaError> {
        self.check_len(vector)?;
        Ok(vector
            .positives()
            .map(|i| self.classes[i].code.clone())
            .collect())
    }

    /// Decoded codes in canonical order, e.g. `["CPC", "CPT"]`.
    pub fn decode_ordered(&self, vector: &LabelVector) -> Result<Vec<String>, SchemaError> {
        self.check_len(vector)?;
        Ok(vector
            .positives()
            .map(|i| self.classes[i].code.clone())
            .collect())
    }

    pub fn check_len(&self, vector: &LabelVector) -> Result<(), SchemaError> {
        if vector.len() != self.size() {
            return Err(SchemaError::LengthMismatch {
                expected: self.size(),
                actual: vector.len(),
            });
        }
        Ok(())
    }
}

impl Default for LabelSchema {
    fn default() -> Self {
        Self::coral()
    }
}

/// Multi-hot label vector aligned with a [`LabelSchema`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn zeros(width: usize) -> Self {
        Self(vec![0; width])
    }

    pub fn from_flags(flags: Vec<u8>) -> Result<Self, SchemaError> {
        if let Some((position, &value)) = flags.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(SchemaError::NonBinary {
                position,
                value: value as i64,
            });
        }
        Ok(Self(flags))
    }

    pub fn from_bools(flags: &[bool]) -> Self {
        Self(flags.iter().map(|&b| b as u8).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flags(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    /// Indices of the positive classes, ascending.
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Vec::<i64>::deserialize(d)?;
        if let Some((position, &value)) = raw.iter().enumerate().find(|(_, &v)| v != 0 && v != 1)
        {
            return Err(serde::de::Error::custom(SchemaError::NonBinary { position, value }));
        }
        Ok(Self(raw.into_iter().map(|v| v as u8).collect()))
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}
