//! `report.json`: canonical key order, percentages with two decimals.
//!
//! ```json
//! {
//!   "accuracy": 99.89,
//!   "confusion": [[299, 0, 1], [0, 300, 0], [0, 0, 300]],
//!   "per_class": {
//!     "Expired": {"precision": 100.00, "recall": 99.67, "f1": 99.83},
//!     ...
//!   },
//!   "warnings": []
//! }
//! ```

use std::fmt::Write;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::{ClassMetrics, Confusion, EvalReport};
use crate::{CLASS_NAMES, NUM_CLASSES};

/// Fraction rendered as a percentage with two decimals.
pub fn percent(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

pub fn to_json(report: &EvalReport) -> String {
    let mut s = String::from("{\n");
    let _ = writeln!(s, "  \"accuracy\": {},", percent(report.accuracy));
    let rows: Vec<String> = report
        .confusion
        .counts
        .iter()
        .map(|r| format!("[{}, {}, {}]", r[0], r[1], r[2]))
        .collect();
    let _ = writeln!(s, "  \"confusion\": [{}],", rows.join(", "));
    s.push_str("  \"per_class\": {\n");
    for (c, m) in report.per_class.iter().enumerate() {
        let sep = if c + 1 < NUM_CLASSES { "," } else { "" };
        let _ = writeln!(
            s,
            "    \"{}\": {{\"precision\": {}, \"recall\": {}, \"f1\": {}}}{sep}",
            CLASS_NAMES[c],
            percent(m.precision),
            percent(m.recall),
            percent(m.f1)
        );
    }
    s.push_str("  },\n");
    let warnings: Vec<String> = report
        .warnings
        .iter()
        .map(|w| serde_json::to_string(w).expect("strings serialize"))
        .collect();
    let _ = writeln!(s, "  \"warnings\": [{}]", warnings.join(", "));
    s.push_str("}\n");
    s
}

fn malformed(msg: &str) -> Error {
    Error::data(format!("malformed report: {msg}"))
}

fn pct(v: &Value, key: &str) -> Result<f64> {
    v.get(key)
        .and_then(Value::as_f64)
        .map(|p| p / 100.0)
        .ok_or_else(|| malformed(&format!("missing number {key:?}")))
}

pub fn from_json(text: &str) -> Result<EvalReport> {
    let v: Value = serde_json::from_str(text).map_err(|e| malformed(&e.to_string()))?;
    let mut confusion = Confusion::default();
    let rows = v
        .get("confusion")
        .and_then(Value::as_array)
        .filter(|r| r.len() == NUM_CLASSES)
        .ok_or_else(|| malformed("confusion must be a 3x3 array"))?;
    for (t, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .filter(|r| r.len() == NUM_CLASSES)
            .ok_or_else(|| malformed("confusion must be a 3x3 array"))?;
        for (p, cell) in row.iter().enumerate() {
            confusion.counts[t][p] = cell.as_u64().ok_or_else(|| malformed("confusion counts must be integers"))?;
        }
    }
    let per = v.get("per_class").ok_or_else(|| malformed("missing per_class"))?;
    let mut per_class = [ClassMetrics::default(); NUM_CLASSES];
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let m = per.get(*name).ok_or_else(|| malformed(&format!("missing class {name}")))?;
        per_class[c] = ClassMetrics {
            precision: pct(m, "precision")?,
            recall: pct(m, "recall")?,
            f1: pct(m, "f1")?,
        };
    }
    let warnings = match v.get("warnings") {
        None => Vec::new(),
        Some(w) => w
            .as_array()
            .ok_or_else(|| malformed("warnings must be an array"))?
            .iter()
            .map(|s| s.as_str().map(str::to_string).ok_or_else(|| malformed("warnings must be strings")))
            .collect::<Result<_>>()?,
    };
    Ok(EvalReport {
        confusion,
        accuracy: pct(&v, "accuracy")?,
        per_class,
        warnings,
    })
}
