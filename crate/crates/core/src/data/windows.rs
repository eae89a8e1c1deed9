use serde::{Deserialize, Serialize};

use super::panel::SeriesPanel;
use crate::error::{Result, SttsError};
use crate::tensor::Matrix;

/// Chronological train/valid/test boundaries (exclusive ends).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub valid_end: usize,
    pub test_end: usize,
}

impl SplitSpec {
    pub fn new(train_end: usize, valid_end: usize, test_end: usize) -> Self {
        Self {
            train_end,
            valid_end,
            test_end,
        }
    }

    /// Boundaries at rounded fractions of `n_timestamps`; the test split takes
    /// the remainder.
    pub fn from_fractions(n_timestamps: usize, train: f64, valid: f64) -> Result<Self> {
        if !(train > 0.0 && valid > 0.0 && train + valid < 1.0) {
            return Err(SttsError::Config(format!(
                "split fractions train={train} valid={valid} must be positive and sum below 1"
            )));
        }
        let train_end = (n_timestamps as f64 * train).round() as usize;
        let valid_end = (n_timestamps as f64 * (train + valid)).round() as usize;
        Ok(Self::new(train_end, valid_end, n_timestamps))
    }

    pub fn validate(&self, window: usize, n_timestamps: usize) -> Result<()> {
        if window >= self.train_end {
            return Err(SttsError::Invalid(format!(
                "window length {window} must be smaller than train_end {}",
                self.train_end
            )));
        }
        if !(self.train_end < self.valid_end && self.valid_end < self.test_end && self.test_end <= n_timestamps) {
            return Err(SttsError::Invalid(format!(
                "split {self:?} must satisfy train_end < valid_end < test_end <= {n_timestamps}"
            )));
        }
        Ok(())
    }
}

/// One forecasting sample: the window `[t-P, t)` of every series, with the
/// target series' value at `t` as label.
///
/// Samples are indices into a panel, so they always see its current values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowSample {
    pub target_index: usize,
    pub timestamp: usize,
}

impl WindowSample {
    pub fn new(target_index: usize, timestamp: usize) -> Self {
        Self {
            target_index,
            timestamp,
        }
    }

    #[inline]
    pub fn window<'p>(&self, panel: &'p SeriesPanel, window: usize) -> &'p [f64] {
        &panel.series(self.target_index)[self.timestamp - window..self.timestamp]
    }

    #[inline]
    pub fn label(&self, panel: &SeriesPanel) -> f64 {
        panel.value(self.target_index, self.timestamp)
    }

    /// Full `N x P` input: the target window in row 0, the other series after
    /// it in index order.
    pub fn full_block(&self, panel: &SeriesPanel, window: usize) -> Matrix {
        let mut order = vec![self.target_index];
        order.extend((0..panel.n_series()).filter(|&j| j != self.target_index));
        self.block(panel, &order, window)
    }

    /// Windows of `series` (in order) ending before this sample's timestamp.
    pub fn block(&self, panel: &SeriesPanel, series: &[usize], window: usize) -> Matrix {
        let mut data = Vec::with_capacity(series.len() * window);
        for &j in series {
            data.extend_from_slice(&panel.series(j)[self.timestamp - window..self.timestamp]);
        }
        Matrix::from_vec(series.len(), window, data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowSplits {
    pub train: Vec<WindowSample>,
    pub valid: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Every `(series, t)` with `t` in the split range and `t >= window` yields
/// one sample, ordered by series then timestamp. Training samples whose label
/// position was excluded by the `remove` fill are skipped.
pub fn make_windows(panel: &SeriesPanel, split: &SplitSpec, window: usize) -> Result<WindowSplits> {
    if window < 1 {
        return Err(SttsError::Invalid("window length must be at least 1".into()));
    }
    split.validate(window, panel.n_timestamps())?;
    let collect = |lo: usize, hi: usize, skip_excluded: bool| -> Vec<WindowSample> {
        let mut out = Vec::new();
        for i in 0..panel.n_series() {
            for t in lo.max(window)..hi {
                if skip_excluded && panel.excluded().contains(&(i, t)) {
                    continue;
                }
                out.push(WindowSample::new(i, t));
            }
        }
        out
    };
    Ok(WindowSplits {
        train: collect(0, split.train_end, true),
        valid: collect(split.train_end, split.valid_end, false),
        test: collect(split.valid_end, split.test_end, false),
    })
}
