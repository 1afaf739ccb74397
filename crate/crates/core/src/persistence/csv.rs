//! CSV export of experiment records.
//!
//! Columns are `series,step,e0,e_r,total,test_error,ber`. Numbers are written
//! in scientific notation with nine significant digits; a missing metric is
//! an empty field.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::record::{ExperimentRecord, RecordRow};

pub const RECORD_CSV_HEADER: &str = "series,step,e0,e_r,total,test_error,ber";

fn num(v: f64) -> String {
    format!("{v:.8e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn record_to_csv(record: &ExperimentRecord) -> Result<String> {
    let mut out = String::from(RECORD_CSV_HEADER);
    out.push('\n');
    for row in &record.rows {
        if row.series.contains([',', '"', '\n', '\r']) {
            return Err(Error::config(format!("series name {:?} is not CSV-safe", row.series)));
        }
        let fields = [
            row.series.clone(),
            num(row.step),
            num(row.e0),
            num(row.e_r),
            num(row.total),
            opt(row.test_error),
            opt(row.ber),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_record_csv(record: &ExperimentRecord, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), record_to_csv(record)?.as_bytes())
}

pub fn parse_record_csv(text: &str) -> Result<ExperimentRecord> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == RECORD_CSV_HEADER => {}
        _ => return Err(Error::Invalid("record CSV: missing or unexpected header".into())),
    }
    let mut record = ExperimentRecord::default();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Invalid(format!("record CSV line {}: {what}", i + 2));
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let req = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { req(s).map(Some) };
        record.push(RecordRow {
            series: f[0].to_string(),
            step: req(f[1])?,
            e0: req(f[2])?,
            e_r: req(f[3])?,
            total: req(f[4])?,
            test_error: opt(f[5])?,
            ber: opt(f[6])?,
        });
    }
    Ok(record)
}
