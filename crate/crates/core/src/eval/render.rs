//! Plain-text tables for terminal output.

use std::fmt::Write as _;

use super::{CoPrediction, FnFpRow, MetricsReport};

/// `x` as a percentage with two decimals, rounded half-up.
pub fn format_percent(x: f64) -> String {
    let hundredths = (x * 10_000.0 + 0.5).floor() as i64;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// `11.7M`, `1.9K` or the bare number below a thousand.
pub fn format_parameter_count(n: u64) -> String {
    let (unit, suffix) = match n {
        1_000_000.. => (1_000_000, "M"),
        1_000.. => (1_000, "K"),
        _ => return n.to_string(),
    };
    let tenths = (n * 10 + unit / 2) / unit;
    format!("{}.{}{}", tenths / 10, tenths % 10, suffix)
}

fn row(out: &mut String, cells: &[String], widths: &[usize]) {
    let line: Vec<String> = cells
        .iter()
        .zip(widths)
        .enumerate()
        .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
        .collect();
    out.push_str(line.join("  ").trim_end());
    out.push('\n');
}

fn table(header: Vec<String>, body: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    row(&mut out, &header, &widths);
    for r in &body {
        row(&mut out, r, &widths);
    }
    out
}

/// One-row summary table: match ratio, micro F1, macro F1, per-class F1,
/// then the parameter count when known.
pub fn render_report(report: &MetricsReport) -> String {
    let mut header = vec![
        "Model".to_string(),
        "Match Ratio".into(),
        "Micro F1".into(),
        "Macro F1".into(),
    ];
    header.extend(report.classes.iter().map(|c| c.code.clone()));
    let mut cells = vec![
        report.model.clone().unwrap_or_else(|| "model".into()),
        format_percent(report.match_ratio),
        format_percent(report.micro_f1),
        format_percent(report.macro_f1),
    ];
    cells.extend(report.classes.iter().map(|c| format_percent(c.metrics.f1)));
    if let Some(n) = report.parameter_count {
        header.push("Parameters".into());
        cells.push(format_parameter_count(n));
    }
    let mut out = table(header, vec![cells]);
    let _ = writeln!(
        out,
        "per-class columns are F1 scores (%); {} samples",
        report.sample_count
    );
    let degenerate = report.degenerate_classes();
    if !degenerate.is_empty() {
        let _ = writeln!(out, "degenerate (zero denominator, scored 0): {}", degenerate.join(", "));
    }
    out
}

pub fn render_fn_fp_table(rows: &[FnFpRow]) -> String {
    table(
        vec!["Class".into(), "FN".into(), "FP".into(), "FN/FP".into()],
        rows.iter()
            .map(|r| vec![r.code.clone(), r.fn_count.to_string(), r.fp_count.to_string(), r.ratio_display()])
            .collect(),
    )
}

pub fn render_misclassification(report: &[CoPrediction]) -> String {
    let mut out = String::new();
    for c in report {
        let _ = writeln!(out, "{} false negatives: {}", c.code, c.false_negatives);
        for t in &c.tallies {
            let set = if t.predicted.is_empty() {
                "{}".to_string()
            } else {
                format!("{{{}}}", t.predicted.join(", "))
            };
            let _ = writeln!(out, "  predicted as {set}: {}", t.count);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_rounding() {
        assert_eq!(format_percent(1.0), "100.00");
        assert_eq!(format_percent(0.6), "60.00");
        assert_eq!(format_percent(0.0), "0.00");
        assert_eq!(format_percent(0.123456), "12.35");
        assert_eq!(format_percent(7.0 / 12.0), "58.33");
    }

    #[test]
    fn parameter_units() {
        assert_eq!(format_parameter_count(11_689_512), "11.7M");
        assert_eq!(format_parameter_count(25_557_032), "25.6M");
        assert_eq!(format_parameter_count(1_912), "1.9K");
        assert_eq!(format_parameter_count(72), "72");
    }
}
