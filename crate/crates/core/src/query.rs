//! Label-based patch retrieval.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::ensemble::PredictionSet;
use crate::manifest::{Manifest, Split};
use crate::schema::{LabelSchema, LabelVector};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("codes both required and forbidden: {}", .0.join(", "))]
    Contradictory(Vec<String>),
    #[error("unknown class code `{0}`")]
    UnknownCode(String),
    #[error("prediction for `{0}` has no manifest record")]
    UnknownPatch(String),
    #[error("prediction for `{0}` has the wrong label width")]
    Width(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryExpression {
    pub require: BTreeSet<String>,
    pub forbid: BTreeSet<String>,
    pub site: Option<String>,
    pub split: Option<Split>,
}

impl QueryExpression {
    pub fn validate(&self, schema: &LabelSchema) -> Result<(), QueryError> {
        let both: Vec<String> = self.require.intersection(&self.forbid).cloned().collect();
        if !both.is_empty() {
            return Err(QueryError::Contradictory(both));
        }
        for code in self.require.iter().chain(&self.forbid) {
            if schema.index_of(code).is_none() {
                return Err(QueryError::UnknownCode(code.clone()));
            }
        }
        Ok(())
    }
}

/// Which labels a query inspects.
#[derive(Debug, Clone, Copy)]
pub enum LabelSource<'a> {
    GroundTruth,
    /// Only patches present in the prediction file are candidates.
    Predicted(&'a PredictionSet),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct QueryResult {
    pub patch_ids: Vec<String>,
    pub per_site: BTreeMap<String, usize>,
}

pub fn run_query(manifest: &Manifest, source: LabelSource<'_>, expr: &QueryExpression) -> Result<QueryResult, QueryError> {
    let schema = &manifest.schema;
    expr.validate(schema)?;
    let idx = |set: &BTreeSet<String>| -> Vec<usize> { set.iter().filter_map(|c| schema.index_of(c)).collect() };
    let (require, forbid) = (idx(&expr.require), idx(&expr.forbid));

    let predicted: Option<HashMap<&str, &LabelVector>> = match source {
        LabelSource::GroundTruth => None,
        LabelSource::Predicted(set) => {
            let known = manifest.index_by_id();
            let mut map = HashMap::with_capacity(set.records.len());
            for r in &set.records {
                if !known.contains_key(r.patch_id.as_str()) {
                    return Err(QueryError::UnknownPatch(r.patch_id.clone()));
                }
                if r.labels.len() != schema.size() {
                    return Err(QueryError::Width(r.patch_id.clone()));
                }
                map.insert(r.patch_id.as_str(), &r.labels);
            }
            Some(map)
        }
    };

    let mut result = QueryResult::default();
    for rec in &manifest.records {
        if expr.site.as_ref().is_some_and(|s| *s != rec.site_code) || expr.split.is_some_and(|s| s != rec.split) {
            continue;
        }
        let labels = match &predicted {
            None => &rec.labels,
            Some(map) => match map.get(rec.patch_id.as_str()) {
                Some(l) => *l,
                None => continue,
            },
        };
        if require.iter().all(|&i| labels.get(i)) && !forbid.iter().any(|&i| labels.get(i)) {
            result.patch_ids.push(rec.patch_id.clone());
            *result.per_site.entry(rec.site_code.clone()).or_default() += 1;
        }
    }
    result.patch_ids.sort();
    Ok(result)
}
