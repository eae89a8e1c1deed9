use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use super::ledger::{ResidualLedger, ScoreMatrix};
use super::threshold::{ThresholdConfig, ThresholdMode};
use crate::data::{FillRecord, SeriesPanel};
use crate::error::{Result, SttsError};

/// Outcome of one detection round.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub epoch: usize,
    pub delta: f64,
    pub mode: String,
    pub scores: ScoreMatrix,
    /// Cutoff per series; identical entries in global mode.
    pub thresholds: Vec<f64>,
    pub positions: BTreeSet<(usize, usize)>,
    pub fills: Vec<FillRecord>,
}

impl AnomalyReport {
    pub fn threshold_for(&self, series: usize) -> f64 {
        self.thresholds[series]
    }
}

/// Scores a finalized ledger and flags every position above its cutoff.
/// Positions at or beyond `train_end` are never reported.
pub fn detect(
    ledger: &ResidualLedger,
    delta: f64,
    mode: &dyn ThresholdMode,
    cfg: &ThresholdConfig,
    train_end: usize,
    epoch: usize,
) -> Result<AnomalyReport> {
    if !ledger.is_finalized() {
        return Err(SttsError::Invalid("detect needs a finalized ledger".into()));
    }
    let scores = ledger.score(delta)?;
    let flagged = mode.flag(&scores, cfg)?;
    let positions: BTreeSet<(usize, usize)> = flagged.positions.into_iter().collect();
    for &(i, t) in &positions {
        assert!(t < train_end, "detected position ({i}, {t}) outside the training range");
        assert!(
            scores.get(i, t).unwrap() > flagged.thresholds[i] || cfg.prune,
            "flagged position below its threshold"
        );
    }
    Ok(AnomalyReport {
        epoch,
        delta,
        mode: mode.name().to_string(),
        scores,
        thresholds: flagged.thresholds,
        positions,
        fills: Vec::new(),
    })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    epoch: usize,
    series_id: &'a str,
    timestamp: usize,
    score: f64,
    threshold: f64,
    old_value: f64,
    new_value: f64,
}

/// Writes `epoch,series_id,timestamp,score,threshold,old_value,new_value`.
/// Values are in the panel's original units; removed points repeat the old
/// value.
pub fn write_reports(reports: &[AnomalyReport], panel: &SeriesPanel, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| SttsError::Parse(format!("{}: {e}", path.display())))?;
    let ids = panel.series_ids();
    // the header must be present even with no rows
    w.write_record(["epoch", "series_id", "timestamp", "score", "threshold", "old_value", "new_value"])
        .map_err(|e| SttsError::Parse(e.to_string()))?;
    for r in reports {
        for &(i, t) in &r.positions {
            let fill = r.fills.iter().find(|f| f.series == i && f.timestamp == t);
            let (old, new) = fill.map_or_else(
                || {
                    let v = panel.value(i, t);
                    (v, v)
                },
                |f| (f.old_value, f.new_value),
            );
            let row = ReportRow {
                epoch: r.epoch,
                series_id: &ids[i],
                timestamp: t,
                score: r.scores.get(i, t).unwrap_or(f64::NAN),
                threshold: r.thresholds[i],
                old_value: panel.denormalize(i, old),
                new_value: panel.denormalize(i, new),
            };
            w.serialize(row).map_err(|e| SttsError::Parse(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| SttsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ead::threshold::GlobalThreshold;

    #[test]
    fn zero_residuals_flag_nothing() {
        let mut l = ResidualLedger::new(2, 30);
        for i in 0..2 {
            for t in 5..30 {
                l.set(i, t, Some(0.0), Some(0.0));
            }
        }
        l.mark_finalized();
        let r = detect(&l, 0.5, &GlobalThreshold, &ThresholdConfig::default(), 30, 0).unwrap();
        assert!(r.positions.is_empty());
    }

    #[test]
    fn flagged_positions_exceed_threshold() {
        let mut l = ResidualLedger::new(1, 50);
        for t in 5..50 {
            let v = 0.1 + ((t * 7) % 5) as f64 / 100.0;
            l.set(0, t, Some(v), Some(v));
        }
        l.set(0, 20, Some(3.0), Some(2.0));
        l.mark_finalized();
        let r = detect(&l, 0.5, &GlobalThreshold, &ThresholdConfig::default(), 50, 3).unwrap();
        assert_eq!(r.positions, BTreeSet::from([(0, 20)]));
        assert!(r.scores.get(0, 20).unwrap() > r.thresholds[0]);
        assert_eq!(r.epoch, 3);
    }

    #[test]
    fn unfinalized_ledger_is_rejected() {
        let l = ResidualLedger::new(1, 20);
        assert!(detect(&l, 0.5, &GlobalThreshold, &ThresholdConfig::default(), 20, 0).is_err());
    }

    #[test]
    fn report_csv_has_one_header_and_one_row_per_flag() {
        let mut l = ResidualLedger::new(1, 50);
        for t in 5..50 {
            l.set(0, t, Some(0.1 + (t % 3) as f64 / 50.0), Some(0.1));
        }
        l.set(0, 20, Some(3.0), Some(2.0));
        l.mark_finalized();
        let r = detect(&l, 0.5, &GlobalThreshold, &ThresholdConfig::default(), 50, 0).unwrap();
        let values = crate::tensor::Matrix::from_rows(&[(0..50).map(|t| t as f64).collect::<Vec<_>>()]);
        let panel = SeriesPanel::new(values, vec!["a".into()], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_reports(&[r], &panel, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("epoch,series_id"));
        assert!(lines[1].starts_with("0,a,20,"));
        write_reports(&[], &panel, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    }
}
