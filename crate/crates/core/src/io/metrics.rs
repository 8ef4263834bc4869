//! Metrics output: one flat record per (run, epoch, metric), written both as
//! line-delimited JSON and as a CSV table with a fixed column order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FormatError;

pub const CSV_COLUMNS: [&str; 10] = [
    "run_id", "method", "rank", "init", "scaling", "lr", "seed", "epoch", "metric", "value",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub method: String,
    /// Grid coordinates that do not apply to a method are empty strings.
    pub rank: String,
    pub init: String,
    pub scaling: String,
    pub lr: String,
    pub seed: u64,
    pub epoch: u32,
    pub metric: String,
    /// `None` stands for a non-finite value in JSON output.
    pub value: Option<f64>,
}

impl MetricsRecord {
    pub fn value_or_nan(&self) -> f64 {
        self.value.unwrap_or(f64::NAN)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> Result<String, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.run_id.as_str(),
            &r.method,
            &r.rank,
            &r.init,
            &r.scaling,
            &r.lr,
            &r.seed.to_string(),
            &r.epoch.to_string(),
            &r.metric,
            &format_value(r.value_or_nan()),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| FormatError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn metrics_to_jsonl(records: &[MetricsRecord]) -> Result<String, FormatError> {
    let mut out = String::new();
    for r in records {
        let mut r = r.clone();
        r.value = r.value.filter(|v| v.is_finite());
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, FormatError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(FormatError::Parse {
            line: 1,
            message: format!("unexpected header {:?}", headers),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or_default().to_string();
        let num_err = |e: String| FormatError::Parse {
            line: i + 2,
            message: e,
        };
        let value: f64 = field(9).parse().map_err(|e| num_err(format!("{e}")))?;
        out.push(MetricsRecord {
            run_id: field(0),
            method: field(1),
            rank: field(2),
            init: field(3),
            scaling: field(4),
            lr: field(5),
            seed: field(6).parse().map_err(|e| num_err(format!("{e}")))?,
            epoch: field(7).parse().map_err(|e| num_err(format!("{e}")))?,
            metric: field(8),
            value: Some(value),
        });
    }
    Ok(out)
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricsRecord>, FormatError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FormatError::from))
        .collect()
}

/// Writes `metrics.jsonl` and `metrics.csv` into `dir`.
pub fn write_metrics(records: &[MetricsRecord], dir: &Path) -> Result<(), FormatError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.jsonl"), metrics_to_jsonl(records)?)?;
    fs::write(dir.join("metrics.csv"), metrics_to_csv(records)?)?;
    Ok(())
}
