//! Hierarchical evaluation metrics, computed from prediction records so any
//! model's output can be scored offline.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{HcastError, Result};
use crate::taxonomy::{LabelPath, TaxonomyTree};

/// One scored sample. Serialized as `{"id": .., "pred": [..], "truth": [..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(rename = "pred")]
    pub predicted: LabelPath,
    pub truth: LabelPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_level_accuracy: Vec<f64>,
    pub wap: f64,
    pub tice: f64,
    pub fpa: f64,
    pub n: usize,
}

fn non_empty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        Err(HcastError::EmptyInput("no prediction records".into()))
    } else {
        Ok(())
    }
}

/// Fraction of records whose prediction at `level` (0-based, coarse first)
/// matches the truth.
pub fn level_accuracy(records: &[PredictionRecord], level: usize) -> Result<f64> {
    non_empty(records)?;
    let mut hits = 0usize;
    for r in records {
        let (p, t) = (r.predicted.labels().get(level), r.truth.labels().get(level));
        match (p, t) {
            (Some(p), Some(t)) => hits += usize::from(p == t),
            _ => return Err(HcastError::Shape(format!("record {} has no level {level}", r.id))),
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Class-count weighted mean of per-level accuracies.
pub fn wap(per_level_accuracy: &[f64], level_sizes: &[usize]) -> Result<f64> {
    if per_level_accuracy.len() != level_sizes.len() {
        return Err(HcastError::Shape(format!(
            "{} accuracies for {} levels",
            per_level_accuracy.len(),
            level_sizes.len()
        )));
    }
    let total: usize = level_sizes.iter().sum();
    if total == 0 {
        return Err(HcastError::EmptyInput("taxonomy has no classes".into()));
    }
    Ok(per_level_accuracy.iter().zip(level_sizes).map(|(p, &n)| p * n as f64).sum::<f64>() / total as f64)
}

/// Fraction of predicted paths that do not exist in the taxonomy.
pub fn tice(records: &[PredictionRecord], tree: &TaxonomyTree) -> Result<f64> {
    non_empty(records)?;
    let mut invalid = 0usize;
    for r in records {
        if !tree.is_valid_path(&r.predicted)? {
            invalid += 1;
        }
    }
    Ok(invalid as f64 / records.len() as f64)
}

/// Fraction of records predicted correctly at every level.
pub fn fpa(records: &[PredictionRecord]) -> Result<f64> {
    non_empty(records)?;
    let hits = records.iter().filter(|r| r.predicted == r.truth).count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn assemble_report(records: &[PredictionRecord], tree: &TaxonomyTree) -> Result<MetricsReport> {
    non_empty(records)?;
    let per_level_accuracy = (0..tree.num_levels()).map(|l| level_accuracy(records, l)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        wap: wap(&per_level_accuracy, tree.level_sizes())?,
        tice: tice(records, tree)?,
        fpa: fpa(records)?,
        per_level_accuracy,
        n: records.len(),
    })
}

pub fn write_predictions<W: Write>(mut out: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| HcastError::Format(format!("writing predictions: {e}")))?;
    }
    Ok(())
}

/// Parses a JSON Lines prediction dump. Blank lines are skipped; a malformed
/// line fails with its 1-based line number.
pub fn read_predictions<R: BufRead>(source: R) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| HcastError::Format(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| HcastError::Format(format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Plain-text table: FPA first, then per-level accuracy, wAP and TICE, all
/// in percent.
pub fn render_table(report: &MetricsReport) -> String {
    let levels = report.per_level_accuracy.len();
    let mut header = format!("{:>8}", "FPA");
    let mut row = format!("{:>8.2}", 100.0 * report.fpa);
    for (l, p) in report.per_level_accuracy.iter().enumerate() {
        let name = match (l, levels) {
            (0, _) => "coarse".to_string(),
            (l, n) if l + 1 == n => "fine".to_string(),
            (l, _) => format!("level{}", l + 1),
        };
        let _ = write!(header, " {name:>8}");
        let _ = write!(row, " {:>8.2}", 100.0 * p);
    }
    let _ = write!(header, " {:>8} {:>8}", "wAP", "TICE");
    let _ = write!(row, " {:>8.2} {:>8.2}", 100.0 * report.wap, 100.0 * report.tice);
    format!("{header}\n{row}\n(n = {})\n", report.n)
}
