//! Comparison table across run directories.
//!
//! Rows follow the order runs are given in. Columns are fixed: `run`,
//! `iou_0` .. `iou_{C-1}`, `miou`, `best`. The row with the highest mIoU
//! carries `*` in `best` (first such row on ties).

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::Domain;
use crate::eval::parse_iou_csv;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("no runs given")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub ious: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub best: Option<usize>,
}

pub fn metrics_file(domain: Domain) -> String {
    format!("metrics_{domain}_val.csv")
}

pub fn build(runs: &[PathBuf], domain: Domain) -> Result<Report, ReportError> {
    if runs.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut rows = Vec::new();
    for dir in runs {
        let path = dir.join(metrics_file(domain));
        let malformed = |detail: String| ReportError::Malformed {
            path: path.clone(),
            detail,
        };
        let text = fs::read_to_string(&path).map_err(|e| malformed(e.to_string()))?;
        let (ious, miou) = parse_iou_csv(&text).map_err(malformed)?;
        if let Some(first) = rows.first().map(|r: &ReportRow| r.ious.len()) {
            if first != ious.len() {
                return Err(malformed(format!("{} classes, earlier runs have {first}", ious.len())));
            }
        }
        rows.push(ReportRow {
            run: run_name(dir),
            ious,
            miou,
        });
    }
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(m) = r.miou {
            if best.is_none_or(|b| m > rows[b].miou.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(i);
            }
        }
    }
    Ok(Report { rows, best })
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn cell(v: Option<f64>) -> String {
    v.map_or("absent".to_string(), |v| format!("{v:.4}"))
}

impl Report {
    fn header(&self) -> Vec<String> {
        let classes = self.rows.first().map_or(0, |r| r.ious.len());
        let mut h = vec!["run".to_string()];
        h.extend((0..classes).map(|c| format!("iou_{c}")));
        h.push("miou".into());
        h.push("best".into());
        h
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = vec![r.run.clone()];
                row.extend(r.ious.iter().map(|&v| cell(v)));
                row.push(cell(r.miou));
                row.push(if self.best == Some(i) { "*".into() } else { String::new() });
                row
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Space-padded columns for reading in a terminal.
    pub fn to_text(&self) -> String {
        let mut all = vec![self.header()];
        all.extend(self.cells());
        let widths: Vec<usize> = (0..all[0].len())
            .map(|c| all.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &all {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(v, &w)| format!("{v:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
