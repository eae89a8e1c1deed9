use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SttsError};
use crate::tensor::Matrix;

/// Per-series z-score parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// An `N x T` panel of series with optional entity graph and ground-truth
/// anomaly labels.
///
/// `values` are held in normalised units once [`SeriesPanel::normalize`] has
/// been called. Training-label positions excluded by the `remove` fill live in
/// `excluded` and are skipped when training windows are built.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    values: Matrix,
    series_ids: Vec<String>,
    graph: Option<Matrix>,
    norm_stats: Vec<NormStats>,
    normalized: bool,
    anomaly_labels: Option<Vec<Vec<bool>>>,
    excluded: BTreeSet<(usize, usize)>,
}

impl SeriesPanel {
    pub fn new(values: Matrix, series_ids: Vec<String>, graph: Option<Matrix>) -> Result<Self> {
        let (n, t) = values.shape();
        if n == 0 || t == 0 {
            return Err(SttsError::Invalid("panel must have at least one series and one timestamp".into()));
        }
        if series_ids.len() != n {
            return Err(SttsError::Invalid(format!(
                "{} series ids for {n} series",
                series_ids.len()
            )));
        }
        let unique: BTreeSet<&String> = series_ids.iter().collect();
        if unique.len() != n {
            return Err(SttsError::Invalid("duplicate series ids".into()));
        }
        if let Some((i, j)) = first_non_finite(&values) {
            return Err(SttsError::MissingValue {
                series: series_ids[i].clone(),
                timestamp: j,
            });
        }
        if let Some(g) = &graph {
            validate_graph(g, n)?;
        }
        Ok(Self {
            values,
            series_ids,
            graph,
            norm_stats: vec![NormStats::IDENTITY; n],
            normalized: false,
            anomaly_labels: None,
            excluded: BTreeSet::new(),
        })
    }

    pub fn with_labels(mut self, labels: Vec<Vec<bool>>) -> Result<Self> {
        if labels.len() != self.n_series() || labels.iter().any(|r| r.len() != self.n_timestamps()) {
            return Err(SttsError::Invalid("anomaly label matrix has the wrong shape".into()));
        }
        self.anomaly_labels = Some(labels);
        Ok(self)
    }

    #[inline]
    pub fn n_series(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn n_timestamps(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    #[inline]
    pub fn value(&self, series: usize, t: usize) -> f64 {
        self.values.get(series, t)
    }

    #[inline]
    pub fn series(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub(crate) fn set_value(&mut self, series: usize, t: usize, v: f64) {
        self.values.set(series, t, v);
    }

    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.series_ids.iter().position(|s| s == id)
    }

    pub fn graph(&self) -> Option<&Matrix> {
        self.graph.as_ref()
    }

    pub fn set_graph(&mut self, graph: Option<Matrix>) -> Result<()> {
        if let Some(g) = &graph {
            validate_graph(g, self.n_series())?;
        }
        self.graph = graph;
        Ok(())
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm_stats
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn anomaly_labels(&self) -> Option<&Vec<Vec<bool>>> {
        self.anomaly_labels.as_ref()
    }

    /// Labelled anomaly positions, sorted.
    pub fn labeled_positions(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        if let Some(labels) = &self.anomaly_labels {
            for (i, row) in labels.iter().enumerate() {
                for (t, &flag) in row.iter().enumerate() {
                    if flag {
                        out.insert((i, t));
                    }
                }
            }
        }
        out
    }

    pub fn excluded(&self) -> &BTreeSet<(usize, usize)> {
        &self.excluded
    }

    pub(crate) fn exclude(&mut self, series: usize, t: usize) {
        self.excluded.insert((series, t));
    }

    /// Z-score every series with statistics fitted on timestamps `[0, fit_end)`.
    pub fn normalize(&mut self, fit_end: usize) -> Result<()> {
        if self.normalized {
            return Err(SttsError::Invalid("panel is already normalized".into()));
        }
        let t = self.n_timestamps();
        if fit_end < 2 || fit_end > t {
            return Err(SttsError::Invalid(format!(
                "normalization range [0, {fit_end}) invalid for {t} timestamps"
            )));
        }
        let mut stats = Vec::with_capacity(self.n_series());
        for i in 0..self.n_series() {
            let fit = &self.values.row(i)[..fit_end];
            let mean = fit.iter().sum::<f64>() / fit_end as f64;
            let var = fit.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / fit_end as f64;
            let std = var.sqrt();
            if std <= f64::EPSILON * mean.abs().max(1.0) {
                return Err(SttsError::ConstantSeries(self.series_ids[i].clone()));
            }
            stats.push(NormStats { mean, std });
        }
        for (i, s) in stats.iter().enumerate() {
            for x in self.values.row_mut(i) {
                *x = s.normalize(*x);
            }
        }
        self.norm_stats = stats;
        self.normalized = true;
        Ok(())
    }

    #[inline]
    pub fn denormalize(&self, series: usize, z: f64) -> f64 {
        self.norm_stats[series].denormalize(z)
    }

    /// Values in original units.
    pub fn raw_values(&self) -> Matrix {
        Matrix::from_fn(self.n_series(), self.n_timestamps(), |i, t| {
            self.denormalize(i, self.values.get(i, t))
        })
    }
}

fn first_non_finite(m: &Matrix) -> Option<(usize, usize)> {
    for i in 0..m.rows() {
        if let Some(t) = m.row(i).iter().position(|v| !v.is_finite()) {
            return Some((i, t));
        }
    }
    None
}

fn validate_graph(g: &Matrix, n: usize) -> Result<()> {
    if g.shape() != (n, n) {
        return Err(SttsError::Invalid(format!(
            "graph is {}x{}, expected {n}x{n}",
            g.rows(),
            g.cols()
        )));
    }
    for i in 0..n {
        if g.get(i, i) != 0.0 {
            return Err(SttsError::Invalid(format!("graph has a self loop at node {i}")));
        }
        for j in 0..n {
            let w = g.get(i, j);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(SttsError::Invalid(format!("graph weight ({i},{j}) must be a nonnegative real")));
            }
            if w != g.get(j, i) {
                return Err(SttsError::Invalid(format!("graph is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn constant_series_is_rejected() {
        let mut p = SeriesPanel::new(Matrix::filled(1, 8, 5.0), ids(1), None).unwrap();
        let err = p.normalize(8).unwrap_err();
        assert!(matches!(err, SttsError::ConstantSeries(_)));
        assert!(err.to_string().contains("constant series"));
    }

    #[test]
    fn asymmetric_graph_is_rejected() {
        let mut g = Matrix::zeros(2, 2);
        g.set(0, 1, 1.0);
        assert!(SeriesPanel::new(Matrix::zeros(2, 3), ids(2), Some(g)).is_err());
    }

    #[test]
    fn nan_is_reported_as_missing() {
        let mut v = Matrix::filled(2, 3, 1.0);
        v.set(1, 2, f64::NAN);
        let err = SeriesPanel::new(v, ids(2), None).unwrap_err();
        assert!(matches!(err, SttsError::MissingValue { timestamp: 2, .. }));
    }

    proptest! {
        #[test]
        fn normalize_then_denormalize_is_identity(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 12), 1..4),
            fit_end in 4usize..12,
        ) {
            let n = rows.len();
            let original = Matrix::from_rows(&rows);
            let mut p = SeriesPanel::new(original.clone(), ids(n), None).unwrap();
            prop_assume!(p.normalize(fit_end).is_ok());
            let back = p.raw_values();
            for i in 0..n {
                for t in 0..12 {
                    let (a, b) = (original.get(i, t), back.get(i, t));
                    prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
                }
            }
        }
    }
}
