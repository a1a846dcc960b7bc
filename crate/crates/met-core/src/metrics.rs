//! Training metrics CSV: one row per (epoch, split, exit) plus an `all` row
//! per split, under the fixed header
//! `epoch,split,exit,ce,acc,graph_term,total_loss,lr`.

use std::fs;
use std::path::Path;

use crate::error::{MetError, Result};

pub const METRICS_HEADER: &str = "epoch,split,exit,ce,acc,graph_term,total_loss,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    /// `"1"..="E"` or `"all"`.
    pub exit: String,
    pub ce: f64,
    pub acc: f64,
    pub graph_term: f64,
    pub total_loss: f64,
    pub lr: f64,
}

impl MetricsRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.exit,
            self.ce,
            self.acc,
            self.graph_term,
            self.total_loss,
            self.lr
        )
    }
}

pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(MetError::Data("no metrics rows to emit".into()));
    }
    let mut out = String::with_capacity(rows.len() * 64);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(MetError::Data(format!(
                "bad metrics header {other:?}, expected {METRICS_HEADER:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(MetError::Data(format!(
                "metrics line {} has {} fields",
                idx + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| MetError::Data(format!("bad number {s:?} on line {}", idx + 2)))
        };
        rows.push(MetricsRow {
            epoch: fields[0]
                .parse()
                .map_err(|_| MetError::Data(format!("bad epoch {:?}", fields[0])))?,
            split: fields[1].to_string(),
            exit: fields[2].to_string(),
            ce: num(fields[3])?,
            acc: num(fields[4])?,
            graph_term: num(fields[5])?,
            total_loss: num(fields[6])?,
            lr: num(fields[7])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, split: &str, exit: &str) -> MetricsRow {
        MetricsRow {
            epoch,
            split: split.into(),
            exit: exit.into(),
            ce: 1.25,
            acc: 0.5,
            graph_term: -0.001953125,
            total_loss: 1.248046875,
            lr: 0.0005,
        }
    }

    #[test]
    fn emits_one_row_per_exit_and_split() {
        let mut rows = Vec::new();
        for split in ["train", "val"] {
            for exit in ["1", "2", "3", "all"] {
                rows.push(row(1, split, exit));
            }
        }
        let path = std::env::temp_dir().join(format!("met-metrics-{}.csv", std::process::id()));
        emit_metrics(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 9); // header + 8 data rows
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn round_trip_recovers_values() {
        let rows = vec![row(3, "train", "1"), row(3, "val", "all")];
        let path = std::env::temp_dir().join(format!("met-metrics-rt-{}.csv", std::process::id()));
        emit_metrics(&rows, &path).unwrap();
        let parsed = parse_metrics(&path).unwrap();
        assert_eq!(parsed.len(), 2);
        for (a, b) in parsed.iter().zip(&rows) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.split, b.split);
            assert_eq!(a.exit, b.exit);
            assert!((a.ce - b.ce).abs() < 1e-6);
            assert!((a.lr - b.lr).abs() < 1e-6);
            assert!((a.total_loss - b.total_loss).abs() < 1e-6);
        }
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_bad_header() {
        let path = std::env::temp_dir().join(format!("met-metrics-bad-{}.csv", std::process::id()));
        fs::write(&path, "epoch,split\n1,train\n").unwrap();
        assert!(parse_metrics(&path).is_err());
        fs::remove_file(&path).unwrap();
    }
}
