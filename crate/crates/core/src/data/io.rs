//! Panel CSV, graph edge-list and anomaly-label files.
//!
//! Panel: header `series_id,t0,t1,...`, one row per series.
//! Graph: `id_a,id_b[,weight]` per line, undirected, weight defaults to 1.
//! Labels: header `series_id,timestamp`, one row per anomalous point.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::panel::SeriesPanel;
use crate::error::{Result, SttsError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    ForwardFill,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub missing: MissingPolicy,
    /// Fit normalisation on `[0, normalize_end)`; `None` leaves values raw.
    pub normalize_end: Option<usize>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SttsError::io(path, e))
}

fn parse_cell(cell: &str) -> Option<f64> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
        return None;
    }
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parse panel CSV text into raw values and ids.
pub fn parse_panel_csv(text: &str, missing: MissingPolicy) -> Result<(Matrix, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| SttsError::Parse(format!("panel header: {e}")))?
        .clone();
    if headers.get(0).map(str::trim) != Some("series_id") {
        return Err(SttsError::Parse("panel header must start with series_id".into()));
    }
    let t = headers.len() - 1;
    if t == 0 {
        return Err(SttsError::Parse("panel has no timestamp columns".into()));
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| SttsError::Parse(format!("panel row {}: {e}", row_idx + 1)))?;
        let id = record.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(SttsError::Parse(format!("panel row {} has an empty series_id", row_idx + 1)));
        }
        if record.len() - 1 != t {
            return Err(SttsError::Parse(format!(
                "inconsistent series length: series {id} has {} values, header has {t}",
                record.len() - 1
            )));
        }
        let mut row = Vec::with_capacity(t);
        let mut last: Option<f64> = None;
        for (k, cell) in record.iter().skip(1).enumerate() {
            let v = match (parse_cell(cell), missing) {
                (Some(v), _) => v,
                (None, MissingPolicy::ForwardFill) if last.is_some() => last.unwrap(),
                (None, _) => {
                    if !cell.trim().is_empty() && cell.trim().parse::<f64>().is_err() {
                        return Err(SttsError::Parse(format!(
                            "series {id} timestamp {k}: cannot parse {cell:?}"
                        )));
                    }
                    return Err(SttsError::MissingValue {
                        series: id,
                        timestamp: k,
                    });
                }
            };
            last = Some(v);
            row.push(v);
        }
        ids.push(id);
        data.extend(row);
    }
    if ids.is_empty() {
        return Err(SttsError::Parse("panel has no series".into()));
    }
    Ok((Matrix::from_vec(ids.len(), t, data), ids))
}

/// Parse an undirected edge list into a symmetric adjacency matrix.
pub fn parse_graph(text: &str, series_ids: &[String]) -> Result<Matrix> {
    let n = series_ids.len();
    let mut adj = Matrix::zeros(n, n);
    let index = |id: &str| -> Result<usize> {
        series_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| SttsError::Invalid(format!("graph id mismatch: unknown series {id:?}")))
    };
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if line_no == 0 && fields.first() == Some(&"id_a") {
            continue;
        }
        if !(2..=3).contains(&fields.len()) {
            return Err(SttsError::Parse(format!("graph line {}: expected id_a,id_b[,weight]", line_no + 1)));
        }
        let a = index(fields[0])?;
        let b = index(fields[1])?;
        if a == b {
            return Err(SttsError::Invalid(format!("graph line {}: self loop on {}", line_no + 1, fields[0])));
        }
        let w = match fields.get(2) {
            Some(s) => s
                .parse::<f64>()
                .ok()
                .filter(|w| w.is_finite() && *w >= 0.0)
                .ok_or_else(|| SttsError::Parse(format!("graph line {}: bad weight {s:?}", line_no + 1)))?,
            None => 1.0,
        };
        adj.set(a, b, w);
        adj.set(b, a, w);
    }
    Ok(adj)
}

pub fn load_panel(path: &Path, graph_path: Option<&Path>, options: &LoadOptions) -> Result<SeriesPanel> {
    let text = read_to_string(path)?;
    let (values, ids) = parse_panel_csv(&text, options.missing)?;
    let graph = match graph_path {
        Some(gp) => Some(parse_graph(&read_to_string(gp)?, &ids)?),
        None => None,
    };
    let mut panel = SeriesPanel::new(values, ids, graph)?;
    if let Some(end) = options.normalize_end {
        panel.normalize(end)?;
    }
    Ok(panel)
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| SttsError::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| SttsError::io(path, e))
}

/// Write the panel in original units.
pub fn write_panel(panel: &SeriesPanel, path: &Path) -> Result<()> {
    let raw = panel.raw_values();
    let mut out = String::from("series_id");
    for t in 0..panel.n_timestamps() {
        out.push_str(&format!(",t{t}"));
    }
    out.push('\n');
    for (i, id) in panel.series_ids().iter().enumerate() {
        out.push_str(id);
        for v in raw.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn write_graph(panel: &SeriesPanel, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(g) = panel.graph() {
        let ids = panel.series_ids();
        for i in 0..g.rows() {
            for j in (i + 1)..g.cols() {
                let w = g.get(i, j);
                if w != 0.0 {
                    out.push_str(&format!("{},{},{}\n", ids[i], ids[j], w));
                }
            }
        }
    }
    write_string(path, &out)
}

pub fn write_labels(panel: &SeriesPanel, path: &Path) -> Result<()> {
    let mut out = String::from("series_id,timestamp\n");
    let ids = panel.series_ids();
    for (i, t) in panel.labeled_positions() {
        out.push_str(&format!("{},{}\n", ids[i], t));
    }
    write_string(path, &out)
}

/// Read a label file into a position set, resolving ids against `series_ids`.
pub fn read_labels(path: &Path, series_ids: &[String]) -> Result<BTreeSet<(usize, usize)>> {
    let text = read_to_string(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| SttsError::Parse(format!("labels: {e}")))?;
        let id = record.get(0).unwrap_or("").trim();
        let t: usize = record
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| SttsError::Parse(format!("labels: bad timestamp for {id}")))?;
        let i = series_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| SttsError::Invalid(format!("labels: unknown series {id:?}")))?;
        out.insert((i, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_panel_and_graph() {
        let text = "series_id,t0,t1,t2\na,1,2,3\nb,4,5,7\n";
        let (m, ids) = parse_panel_csv(text, MissingPolicy::Reject).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(ids, vec!["a", "b"]);
        let g = parse_graph("a,b\n", &ids).unwrap();
        assert_eq!(g.get(0, 1), 1.0);
        assert_eq!(g.get(1, 0), 1.0);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn missing_value_rejected_by_default_and_forward_filled_on_request() {
        let text = "series_id,t0,t1,t2\na,1,2,3\nb,4,,6\nc,7,8,9\n";
        let err = parse_panel_csv(text, MissingPolicy::Reject).unwrap_err();
        assert!(matches!(err, SttsError::MissingValue { timestamp: 1, .. }));
        let (m, _) = parse_panel_csv(text, MissingPolicy::ForwardFill).unwrap();
        assert_eq!(m.row(1), &[4.0, 4.0, 6.0]);
    }

    #[test]
    fn inconsistent_lengths_rejected() {
        let text = "series_id,t0,t1\na,1,2\nb,3\n";
        let err = parse_panel_csv(text, MissingPolicy::Reject).unwrap_err();
        assert!(err.to_string().contains("inconsistent series length"));
    }

    #[test]
    fn unknown_graph_id_rejected() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let err = parse_graph("a,z,2.0\n", &ids).unwrap_err();
        assert!(err.to_string().contains("graph id mismatch"));
    }

    #[test]
    fn malformed_cell_is_a_parse_error() {
        let text = "series_id,t0\na,abc\n";
        assert!(matches!(
            parse_panel_csv(text, MissingPolicy::Reject),
            Err(SttsError::Parse(_))
        ));
    }
}
