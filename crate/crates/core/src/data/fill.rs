//! Fill strategies for flagged training points.
//!
//! Each strategy sits behind [`FillStrategy`] and is looked up by name in a
//! [`FillRegistry`]. Fill values are computed from the panel as it was before
//! the round, using only unflagged points inside the training range.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::panel::SeriesPanel;
use crate::error::{Result, SttsError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillAction {
    Replace(f64),
    /// Drop the training sample whose label is this point.
    Exclude,
}

pub trait FillStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Fill for `series[t]`. `flagged[s]` marks points that may not be used as
    /// support; `series` is truncated to the training range.
    fn fill_value(&self, series: &[f64], flagged: &[bool], t: usize) -> Result<FillAction>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FillParams {
    /// Clean neighbours taken on each side by the `mean` fill.
    pub k: usize,
    /// Clean neighbours used by the `lowess` fill.
    pub span: usize,
    /// Seasonal period for the `periodic_mean` fill.
    pub period: usize,
}

impl Default for FillParams {
    fn default() -> Self {
        Self {
            k: 3,
            span: 10,
            period: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RemoveFill;

impl FillStrategy for RemoveFill {
    fn name(&self) -> &'static str {
        "remove"
    }

    fn fill_value(&self, _series: &[f64], _flagged: &[bool], _t: usize) -> Result<FillAction> {
        Ok(FillAction::Exclude)
    }
}

/// Mean of the nearest `k` clean points on each side.
#[derive(Debug, Clone, Copy)]
pub struct NeighborMeanFill {
    pub k: usize,
}

impl FillStrategy for NeighborMeanFill {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn fill_value(&self, series: &[f64], flagged: &[bool], t: usize) -> Result<FillAction> {
        let left = (0..t).rev().filter(|&s| !flagged[s]).take(self.k);
        let right = (t + 1..series.len()).filter(|&s| !flagged[s]).take(self.k);
        let support: Vec<f64> = left.chain(right).map(|s| series[s]).collect();
        if support.is_empty() {
            return Err(SttsError::Fill(format!("empty neighborhood around timestamp {t}")));
        }
        Ok(FillAction::Replace(support.iter().sum::<f64>() / support.len() as f64))
    }
}

/// Locally weighted linear regression (tricube weights) over the `span`
/// nearest clean points.
#[derive(Debug, Clone, Copy)]
pub struct LowessFill {
    pub span: usize,
}

impl FillStrategy for LowessFill {
    fn name(&self) -> &'static str {
        "lowess"
    }

    fn fill_value(&self, series: &[f64], flagged: &[bool], t: usize) -> Result<FillAction> {
        let mut candidates: Vec<usize> = (0..series.len()).filter(|&s| s != t && !flagged[s]).collect();
        if candidates.is_empty() {
            return Err(SttsError::Fill(format!("empty neighborhood around timestamp {t}")));
        }
        candidates.sort_by_key(|&s| (s.abs_diff(t), s));
        candidates.truncate(self.span.max(1));
        let bandwidth = candidates.iter().map(|&s| s.abs_diff(t)).max().unwrap_or(1) as f64 + 1.0;
        let weights: Vec<f64> = candidates
            .iter()
            .map(|&s| {
                let u = s.abs_diff(t) as f64 / bandwidth;
                (1.0 - u * u * u).powi(3)
            })
            .collect();
        let wsum: f64 = weights.iter().sum();
        let xbar = candidates.iter().zip(&weights).map(|(&s, w)| w * s as f64).sum::<f64>() / wsum;
        let ybar = candidates.iter().zip(&weights).map(|(&s, w)| w * series[s]).sum::<f64>() / wsum;
        let sxx: f64 = candidates
            .iter()
            .zip(&weights)
            .map(|(&s, w)| w * (s as f64 - xbar).powi(2))
            .sum();
        let sxy: f64 = candidates
            .iter()
            .zip(&weights)
            .map(|(&s, w)| w * (s as f64 - xbar) * (series[s] - ybar))
            .sum();
        let slope = if sxx > 1e-12 { sxy / sxx } else { 0.0 };
        Ok(FillAction::Replace(ybar + slope * (t as f64 - xbar)))
    }
}

/// Mean of clean values at the same phase `t mod period`.
#[derive(Debug, Clone, Copy)]
pub struct PeriodicMeanFill {
    pub period: usize,
}

impl FillStrategy for PeriodicMeanFill {
    fn name(&self) -> &'static str {
        "periodic_mean"
    }

    fn fill_value(&self, series: &[f64], flagged: &[bool], t: usize) -> Result<FillAction> {
        let period = self.period.max(1);
        let support: Vec<f64> = (t % period..series.len())
            .step_by(period)
            .filter(|&s| s != t && !flagged[s])
            .map(|s| series[s])
            .collect();
        if support.is_empty() {
            return Err(SttsError::Fill(format!(
                "no clean same-phase values for timestamp {t} (period {period})"
            )));
        }
        Ok(FillAction::Replace(support.iter().sum::<f64>() / support.len() as f64))
    }
}

type FillCtor = fn(&FillParams) -> Box<dyn FillStrategy>;

/// Name-keyed constructors for fill strategies.
#[derive(Clone)]
pub struct FillRegistry {
    ctors: BTreeMap<&'static str, FillCtor>,
}

impl fmt::Debug for FillRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ctors.keys()).finish()
    }
}

impl Default for FillRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl FillRegistry {
    pub fn empty() -> Self {
        Self { ctors: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("remove", |_| Box::new(RemoveFill));
        r.register("mean", |p| Box::new(NeighborMeanFill { k: p.k }));
        r.register("lowess", |p| Box::new(LowessFill { span: p.span }));
        r.register("periodic_mean", |p| Box::new(PeriodicMeanFill { period: p.period }));
        r
    }

    pub fn register(&mut self, name: &'static str, ctor: FillCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ctors.contains_key(name)
    }

    pub fn build(&self, name: &str, params: &FillParams) -> Result<Box<dyn FillStrategy>> {
        self.ctors
            .get(name)
            .map(|ctor| ctor(params))
            .ok_or_else(|| {
                SttsError::Config(format!(
                    "unknown fill strategy {name:?}; known: {}",
                    self.names().join(", ")
                ))
            })
    }
}

/// Old and new value of one rewritten point. `excluded` marks the `remove`
/// fill, which leaves the value untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FillRecord {
    pub series: usize,
    pub timestamp: usize,
    pub old_value: f64,
    pub new_value: f64,
    pub excluded: bool,
}

/// Rewrite `positions` (all inside `[0, train_end)`) with `strategy`.
///
/// Fill values are computed against the panel before any rewrite, so the
/// result does not depend on the order of `positions`. No other position is
/// touched.
pub fn fill_anomalies(
    panel: &mut SeriesPanel,
    positions: &BTreeSet<(usize, usize)>,
    strategy: &dyn FillStrategy,
    train_end: usize,
) -> Result<Vec<FillRecord>> {
    if train_end > panel.n_timestamps() {
        return Err(SttsError::Invalid(format!("train_end {train_end} beyond panel length")));
    }
    for &(i, t) in positions {
        if i >= panel.n_series() || t >= train_end {
            return Err(SttsError::Invalid(format!(
                "fill position ({i}, {t}) outside the training range"
            )));
        }
    }
    let mut flagged = vec![vec![false; train_end]; panel.n_series()];
    for &(i, t) in positions {
        flagged[i][t] = true;
    }
    let mut actions = Vec::with_capacity(positions.len());
    for &(i, t) in positions {
        let series = &panel.series(i)[..train_end];
        actions.push((i, t, strategy.fill_value(series, &flagged[i], t)?));
    }
    let mut records = Vec::with_capacity(actions.len());
    for (i, t, action) in actions {
        let old = panel.value(i, t);
        match action {
            FillAction::Replace(v) => {
                if !v.is_finite() {
                    return Err(SttsError::Numerical(format!("non-finite fill at ({i}, {t})")));
                }
                panel.set_value(i, t, v);
                records.push(FillRecord {
                    series: i,
                    timestamp: t,
                    old_value: old,
                    new_value: v,
                    excluded: false,
                });
            }
            FillAction::Exclude => {
                panel.exclude(i, t);
                records.push(FillRecord {
                    series: i,
                    timestamp: t,
                    old_value: old,
                    new_value: old,
                    excluded: true,
                });
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, SplitSpec};
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    fn panel_from(rows: &[Vec<f64>]) -> SeriesPanel {
        let m = Matrix::from_rows(rows);
        let ids = (0..m.rows()).map(|i| format!("s{i}")).collect();
        SeriesPanel::new(m, ids, None).unwrap()
    }

    fn positions(p: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
        p.iter().copied().collect()
    }

    #[test]
    fn mean_fill_with_one_neighbor_each_side() {
        let mut p = panel_from(&[vec![1.0, 2.0, 3.0, 100.0, 5.0, 6.0]]);
        let rec = fill_anomalies(&mut p, &positions(&[(0, 3)]), &NeighborMeanFill { k: 1 }, 6).unwrap();
        assert_eq!(rec[0].new_value, 4.0);
        assert_eq!(rec[0].old_value, 100.0);
        assert_eq!(p.value(0, 3), 4.0);
    }

    #[test]
    fn periodic_mean_restores_noiseless_periodic_series() {
        let pattern = [1.0, -2.0, 0.5, 3.0, 0.0, -1.5, 2.0];
        let clean: Vec<f64> = (0..70).map(|t| pattern[t % 7]).collect();
        let mut dirty = clean.clone();
        dirty[23] += 40.0;
        let mut p = panel_from(&[dirty]);
        fill_anomalies(&mut p, &positions(&[(0, 23)]), &PeriodicMeanFill { period: 7 }, 70).unwrap();
        assert_eq!(p.series(0), clean.as_slice());
    }

    #[test]
    fn periodic_mean_without_clean_phase_values_errors() {
        let mut p = panel_from(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let err = fill_anomalies(&mut p, &positions(&[(0, 1)]), &PeriodicMeanFill { period: 7 }, 4).unwrap_err();
        assert!(matches!(err, SttsError::Fill(_)));
    }

    #[test]
    fn mean_fill_with_everything_flagged_errors() {
        let mut p = panel_from(&[vec![1.0, 2.0]]);
        let err = fill_anomalies(&mut p, &positions(&[(0, 0), (0, 1)]), &NeighborMeanFill { k: 3 }, 2);
        assert!(err.is_err());
    }

    #[test]
    fn lowess_recovers_a_line() {
        let line: Vec<f64> = (0..30).map(|t| 0.5 * t as f64 - 3.0).collect();
        let mut dirty = line.clone();
        dirty[12] = 99.0;
        dirty[13] = -50.0;
        let mut p = panel_from(&[dirty]);
        fill_anomalies(&mut p, &positions(&[(0, 12), (0, 13)]), &LowessFill { span: 8 }, 30).unwrap();
        assert!((p.value(0, 12) - line[12]).abs() < 1e-9);
        assert!((p.value(0, 13) - line[13]).abs() < 1e-9);
    }

    #[test]
    fn remove_excludes_training_samples() {
        let mut p = panel_from(&[(0..20).map(|t| t as f64).collect(), (0..20).map(|t| (t * t) as f64).collect()]);
        let split = SplitSpec::new(14, 17, 20);
        let before = make_windows(&p, &split, 3).unwrap().train.len();
        let pos = positions(&[(0, 5), (1, 9), (1, 10)]);
        let recs = fill_anomalies(&mut p, &pos, &RemoveFill, 14).unwrap();
        assert!(recs.iter().all(|r| r.excluded && r.old_value == r.new_value));
        let after = make_windows(&p, &split, 3).unwrap().train.len();
        assert_eq!(before - after, 3);
    }

    #[test]
    fn positions_beyond_training_range_rejected() {
        let mut p = panel_from(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        assert!(fill_anomalies(&mut p, &positions(&[(0, 4)]), &NeighborMeanFill { k: 1 }, 4).is_err());
    }

    #[test]
    fn registry_builds_every_builtin_by_name() {
        let reg = FillRegistry::with_builtins();
        for name in ["remove", "mean", "lowess", "periodic_mean"] {
            assert_eq!(reg.build(name, &FillParams::default()).unwrap().name(), name);
        }
        assert!(reg.build("median", &FillParams::default()).is_err());
    }

    proptest! {
        #[test]
        fn fill_touches_only_given_positions(
            seed_vals in prop::collection::vec(-10.0f64..10.0, 40),
            picks in prop::collection::btree_set(0usize..40, 1..6),
            which in 0usize..3,
        ) {
            let rows = vec![seed_vals[..20].to_vec(), seed_vals[20..].to_vec()];
            let mut p = panel_from(&rows);
            let before = p.clone();
            let pos: BTreeSet<(usize, usize)> = picks.iter().map(|&k| (k / 20, k % 20)).collect();
            let strategy: Box<dyn FillStrategy> = match which {
                0 => Box::new(NeighborMeanFill { k: 2 }),
                1 => Box::new(LowessFill { span: 6 }),
                _ => Box::new(PeriodicMeanFill { period: 3 }),
            };
            if fill_anomalies(&mut p, &pos, strategy.as_ref(), 20).is_ok() {
                for i in 0..2 {
                    for t in 0..20 {
                        if !pos.contains(&(i, t)) {
                            prop_assert_eq!(p.value(i, t), before.value(i, t));
                        }
                    }
                }
            }
        }
    }
}
