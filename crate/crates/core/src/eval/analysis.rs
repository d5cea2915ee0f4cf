use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{check_aligned, ConfusionCounts, EvalError};
use crate::schema::{LabelSchema, LabelVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnFpRow {
    pub code: String,
    #[serde(rename = "fn")]
    pub fn_count: u64,
    #[serde(rename = "fp")]
    pub fp_count: u64,
    /// FN ÷ FP at full precision; `None` when FP is 0.
    pub ratio: Option<f64>,
}

impl FnFpRow {
    pub fn new(code: impl Into<String>, fn_count: u64, fp_count: u64) -> Self {
        Self {
            code: code.into(),
            fn_count,
            fp_count,
            ratio: (fp_count > 0).then(|| fn_count as f64 / fp_count as f64),
        }
    }

    /// FN/FP in hundredths, rounded half-up with integer arithmetic.
    pub fn ratio_hundredths(&self) -> Option<u64> {
        (self.fp_count > 0).then(|| (200 * self.fn_count + self.fp_count) / (2 * self.fp_count))
    }

    /// Two-decimal ratio, or `undefined` when FP is 0.
    pub fn ratio_display(&self) -> String {
        match self.ratio_hundredths() {
            Some(h) => format!("{}.{:02}", h / 100, h % 100),
            None => "undefined".to_string(),
        }
    }
}

pub fn fn_fp_table(counts: &ConfusionCounts, schema: &LabelSchema) -> Vec<FnFpRow> {
    schema
        .codes()
        .into_iter()
        .zip(&counts.classes)
        .map(|(code, c)| FnFpRow::new(code, c.fn_, c.fp))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSetTally {
    /// Predicted codes in canonical order; empty means nothing was predicted.
    pub predicted: Vec<String>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoPrediction {
    pub code: String,
    pub false_negatives: u64,
    pub tallies: Vec<LabelSetTally>,
}

/// For each class, how the samples on which it was missed were labeled
/// instead. Tallies run from most to least frequent; ties go to the label
/// set whose class indices sort first.
pub fn misclassification_report(
    predicted: &[LabelVector],
    truth: &[LabelVector],
    schema: &LabelSchema,
) -> Result<Vec<CoPrediction>, EvalError> {
    let width = check_aligned(predicted, truth)?;
    if !truth.is_empty() && width != schema.size() {
        return Err(EvalError::WidthMismatch {
            row: 0,
            expected: schema.size(),
            found: width,
        });
    }
    let codes = schema.codes();
    let mut out = Vec::with_capacity(codes.len());
    for (c, code) in codes.iter().enumerate() {
        let mut tally: HashMap<Vec<usize>, u64> = HashMap::new();
        let mut misses = 0;
        for (p, t) in predicted.iter().zip(truth) {
            if t.get(c) && !p.get(c) {
                misses += 1;
                *tally.entry(p.positives().collect()).or_default() += 1;
            }
        }
        let mut sets: Vec<(Vec<usize>, u64)> = tally.into_iter().collect();
        sets.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.push(CoPrediction {
            code: code.clone(),
            false_negatives: misses,
            tallies: sets
                .into_iter()
                .map(|(idx, count)| LabelSetTally {
                    predicted: idx.into_iter().map(|i| codes[i].clone()).collect(),
                    count,
                })
                .collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_half_up() {
        let cases = [(1, 8, "0.13"), (5, 1000, "0.01"), (1, 200, "0.01"), (1, 201, "0.00"), (7, 0, "undefined")];
        for (fnc, fpc, want) in cases {
            assert_eq!(FnFpRow::new("X", fnc, fpc).ratio_display(), want, "{fnc}/{fpc}");
        }
        assert_eq!(FnFpRow::new("X", 3, 0).ratio, None);
    }

    #[test]
    fn single_trace() {
        let s = LabelSchema::coral();
        let t = vec![s.encode(&["CPT"]).unwrap()];
        let p = vec![s.encode(&["HLC"]).unwrap()];
        let r = misclassification_report(&p, &t, &s).unwrap();
        let cpt = &r[s.index_of("CPT").unwrap()];
        assert_eq!(cpt.false_negatives, 1);
        assert_eq!(cpt.tallies, [LabelSetTally { predicted: vec!["HLC".into()], count: 1 }]);
        assert!(r.iter().filter(|c| c.code != "CPT").all(|c| c.tallies.is_empty()));
    }

    #[test]
    fn tallies_sorted() {
        let s = LabelSchema::coral();
        let e = |c: &[&str]| s.encode(c).unwrap();
        let t = vec![e(&["PHY"]); 5];
        let p = vec![e(&["DDC"]), e(&["HLC"]), e(&["DDC"]), e(&[]), e(&["HLC"])];
        let r = misclassification_report(&p, &t, &s).unwrap();
        let sets: Vec<_> = r[7].tallies.iter().map(|t| (t.predicted.join("+"), t.count)).collect();
        assert_eq!(sets, [("HLC".into(), 2), ("DDC".into(), 2), (String::new(), 1)]);
    }
}
