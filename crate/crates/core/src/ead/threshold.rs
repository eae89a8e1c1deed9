//! Nonparametric dynamic thresholding.
//!
//! Candidate cutoffs are `mu + z sigma` over a grid of `z`. For each one the
//! criterion
//!
//! ```text
//! (d_mu / mu + d_sigma / sigma) / (|e_a| + runs^2)
//! ```
//!
//! rewards cutoffs whose removal drops the mean and spread of the remaining
//! scores a lot while flagging few points in few contiguous runs. Scores are
//! passed as segments; runs never cross a segment boundary.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ledger::ScoreMatrix;
use crate::error::{Result, SttsError};

pub const MIN_SCORES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub z_step: f64,
    /// Apply the run-pruning pass after thresholding.
    pub prune: bool,
    /// Minimum relative drop between consecutive run maxima kept by pruning.
    pub min_decrease: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            z_min: 2.0,
            z_max: 10.0,
            z_step: 0.5,
            prune: false,
            min_decrease: 0.13,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_step > 0.0 && self.z_min.is_finite() && self.z_max >= self.z_min) {
            return Err(SttsError::Config("z grid needs z_step > 0 and z_max >= z_min".into()));
        }
        if !(0.0..1.0).contains(&self.min_decrease) {
            return Err(SttsError::Config("min_decrease must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn z_grid(&self) -> Vec<f64> {
        let n = ((self.z_max - self.z_min) / self.z_step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.z_min + k as f64 * self.z_step).collect()
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

/// Criterion value at cutoff `tau`, or `None` when nothing lies above it.
pub fn criterion(segments: &[Vec<f64>], tau: f64, mean: f64, std: f64) -> Option<f64> {
    let all = segments.iter().flatten().copied();
    let below = all.clone().filter(|&v| v <= tau);
    let n_above = all.clone().filter(|&v| v > tau).count();
    if n_above == 0 {
        return None;
    }
    let (mean_b, std_b, _) = mean_std(below);
    let runs: usize = segments.iter().map(|s| count_runs(s, tau)).sum();
    let d_mean = if mean != 0.0 { (mean - mean_b) / mean } else { 0.0 };
    let d_std = (std - std_b) / std;
    Some((d_mean + d_std) / (n_above as f64 + (runs * runs) as f64))
}

fn count_runs(segment: &[f64], tau: f64) -> usize {
    let mut runs = 0;
    let mut inside = false;
    for &v in segment {
        let above = v > tau;
        if above && !inside {
            runs += 1;
        }
        inside = above;
    }
    runs
}

/// Winning cutoff over `segments`. Ties keep the smallest `z`. Constant
/// scores give `+inf`; when no grid point flags anything the cutoff at
/// `z_max` is returned.
pub fn dynamic_threshold_segments(segments: &[Vec<f64>], cfg: &ThresholdConfig) -> Result<f64> {
    let all = segments.iter().flatten().copied();
    let (mean, std, n) = mean_std(all.clone());
    if n < MIN_SCORES {
        return Err(SttsError::Invalid(format!(
            "dynamic threshold needs at least {MIN_SCORES} scores, got {n}"
        )));
    }
    if all.clone().any(|v| !v.is_finite()) {
        return Err(SttsError::Numerical("non-finite anomaly score".into()));
    }
    if std == 0.0 || !(std / mean.abs().max(f64::MIN_POSITIVE) > 1e-12) {
        return Ok(f64::INFINITY);
    }
    let mut best: Option<(f64, f64)> = None;
    for z in cfg.z_grid() {
        let tau = mean + z * std;
        if let Some(c) = criterion(segments, tau, mean, std) {
            if best.is_none_or(|(bc, _)| c > bc) {
                best = Some((c, tau));
            }
        }
    }
    Ok(best.map_or(mean + cfg.z_max * std, |(_, tau)| tau))
}

pub fn dynamic_threshold(scores: &[f64], cfg: &ThresholdConfig) -> Result<f64> {
    dynamic_threshold_segments(&[scores.to_vec()], cfg)
}

/// Pruning pass: runs above `tau` are ranked by their maximum score, the
/// largest non-flagged score is appended, and runs below the last relative
/// drop of at least `min_decrease` are unflagged. Returns per-segment flags.
pub fn prune_flags(segments: &[Vec<f64>], tau: f64, min_decrease: f64) -> Vec<Vec<bool>> {
    let mut flags: Vec<Vec<bool>> = segments.iter().map(|s| s.iter().map(|&v| v > tau).collect()).collect();
    // (max score, segment, start, end)
    let mut runs = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let mut t = 0;
        while t < seg.len() {
            if seg[t] > tau {
                let start = t;
                let mut peak = seg[t];
                while t < seg.len() && seg[t] > tau {
                    peak = peak.max(seg[t]);
                    t += 1;
                }
                runs.push((peak, si, start, t));
            } else {
                t += 1;
            }
        }
    }
    if runs.is_empty() {
        return flags;
    }
    runs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let normal_max = segments
        .iter()
        .flatten()
        .copied()
        .filter(|&v| v <= tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut maxima: Vec<f64> = runs.iter().map(|r| r.0).collect();
    if normal_max.is_finite() {
        maxima.push(normal_max);
    }
    let mut keep = 0;
    for i in 0..maxima.len().saturating_sub(1) {
        if (maxima[i] - maxima[i + 1]) / maxima[i] > min_decrease {
            keep = i + 1;
        }
    }
    for &(_, si, start, end) in &runs[keep..] {
        for f in &mut flags[si][start..end] {
            *f = false;
        }
    }
    flags
}

/// Flagged positions with their cutoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct Flagged {
    /// One cutoff per series (all equal in global mode).
    pub thresholds: Vec<f64>,
    pub positions: Vec<(usize, usize)>,
}

/// How cutoffs are shared across series.
pub trait ThresholdMode: Send + Sync {
    fn name(&self) -> &'static str;
    fn flag(&self, scores: &ScoreMatrix, cfg: &ThresholdConfig) -> Result<Flagged>;
}

/// Contiguous runs of present scores in one series, with their timestamps.
fn series_segments(scores: &ScoreMatrix, i: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    for (t, v) in scores.series(i).iter().enumerate() {
        match v {
            Some(s) => {
                ts.push(t);
                vs.push(*s);
            }
            None if !ts.is_empty() => out.push((std::mem::take(&mut ts), std::mem::take(&mut vs))),
            None => {}
        }
    }
    if !ts.is_empty() {
        out.push((ts, vs));
    }
    out
}

fn flag_segments(
    segs: &[(usize, Vec<usize>, Vec<f64>)],
    tau: f64,
    cfg: &ThresholdConfig,
    positions: &mut Vec<(usize, usize)>,
) {
    let values: Vec<Vec<f64>> = segs.iter().map(|s| s.2.clone()).collect();
    let flags = if cfg.prune {
        prune_flags(&values, tau, cfg.min_decrease)
    } else {
        values.iter().map(|s| s.iter().map(|&v| v > tau).collect()).collect()
    };
    for ((i, ts, _), f) in segs.iter().zip(flags) {
        positions.extend(ts.iter().zip(f).filter(|(_, f)| *f).map(|(&t, _)| (*i, t)));
    }
}

/// One cutoff over every scored position.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalThreshold;

impl ThresholdMode for GlobalThreshold {
    fn name(&self) -> &'static str {
        "global"
    }

    fn flag(&self, scores: &ScoreMatrix, cfg: &ThresholdConfig) -> Result<Flagged> {
        let segs: Vec<(usize, Vec<usize>, Vec<f64>)> = (0..scores.n_series)
            .flat_map(|i| series_segments(scores, i).into_iter().map(move |(t, v)| (i, t, v)))
            .collect();
        let values: Vec<Vec<f64>> = segs.iter().map(|s| s.2.clone()).collect();
        let tau = dynamic_threshold_segments(&values, cfg)?;
        let mut positions = Vec::new();
        flag_segments(&segs, tau, cfg, &mut positions);
        positions.sort_unstable();
        Ok(Flagged {
            thresholds: vec![tau; scores.n_series],
            positions,
        })
    }
}

/// A separate cutoff for every series.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerSeriesThreshold;

impl ThresholdMode for PerSeriesThreshold {
    fn name(&self) -> &'static str {
        "per_series"
    }

    fn flag(&self, scores: &ScoreMatrix, cfg: &ThresholdConfig) -> Result<Flagged> {
        let mut thresholds = Vec::with_capacity(scores.n_series);
        let mut positions = Vec::new();
        for i in 0..scores.n_series {
            let segs: Vec<(usize, Vec<usize>, Vec<f64>)> =
                series_segments(scores, i).into_iter().map(|(t, v)| (i, t, v)).collect();
            let values: Vec<Vec<f64>> = segs.iter().map(|s| s.2.clone()).collect();
            let tau = dynamic_threshold_segments(&values, cfg)
                .map_err(|e| SttsError::Invalid(format!("series {i}: {e}")))?;
            flag_segments(&segs, tau, cfg, &mut positions);
            thresholds.push(tau);
        }
        positions.sort_unstable();
        Ok(Flagged { thresholds, positions })
    }
}

type ModeCtor = fn() -> Box<dyn ThresholdMode>;

#[derive(Clone)]
pub struct ThresholdRegistry {
    ctors: BTreeMap<&'static str, ModeCtor>,
}

impl fmt::Debug for ThresholdRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ctors.keys()).finish()
    }
}

impl Default for ThresholdRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("global", || Box::new(GlobalThreshold));
        r.register("per_series", || Box::new(PerSeriesThreshold));
        r
    }
}

impl ThresholdRegistry {
    pub fn register(&mut self, name: &'static str, ctor: ModeCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ctors.contains_key(name)
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn ThresholdMode>> {
        self.ctors.get(name).map(|c| c()).ok_or_else(|| {
            SttsError::Config(format!(
                "unknown threshold mode {name:?}; known: {}",
                self.names().join(", ")
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ThresholdConfig {
        ThresholdConfig::default()
    }

    #[test]
    fn grid_is_two_to_ten_by_half() {
        let g = cfg().z_grid();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], 2.0);
        assert_eq!(g[16], 10.0);
    }

    #[test]
    fn equal_scores_flag_nothing() {
        assert_eq!(dynamic_threshold(&[0.3; 50], &cfg()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn too_few_scores_is_an_error() {
        assert!(dynamic_threshold(&[1.0; 9], &cfg()).is_err());
    }

    #[test]
    fn runs_are_counted_within_segments() {
        assert_eq!(count_runs(&[0.0, 5.0, 5.0, 0.0, 5.0], 1.0), 2);
        // one run per segment even when the segments are adjacent in memory
        let segs = vec![vec![0.0, 5.0], vec![5.0, 0.0]];
        let c = criterion(&segs, 1.0, 2.5, 2.5).unwrap();
        let mean_b = 0.0;
        let expected = ((2.5 - mean_b) / 2.5 + (2.5 - 0.0) / 2.5) / (2.0 + 4.0);
        assert!((c - expected).abs() < 1e-15);
    }

    #[test]
    fn pruning_drops_runs_close_to_normal_scores() {
        let mut s = vec![1.0; 40];
        s[5] = 20.0;
        s[20] = 1.05;
        let flags = prune_flags(&[s.clone()], 1.02, 0.13);
        assert!(flags[0][5]);
        assert!(!flags[0][20]);
    }

    #[test]
    fn per_series_catches_series_relative_outlier() {
        // series 0 has unit noise, series 1 tiny noise with a modest bump that
        // is huge relative to its own scale but small next to series 0
        let n = 60;
        let s0: Vec<f64> = (0..n).map(|t| 1.0 + ((t * 37) % 11) as f64 / 5.0).collect();
        let mut s1: Vec<f64> = (0..n).map(|t| 0.01 + ((t * 13) % 7) as f64 / 1000.0).collect();
        s1[30] = 0.5;
        let values: Vec<Option<f64>> = s0.iter().chain(&s1).map(|&v| Some(v)).collect();
        let scores = ScoreMatrix::from_values(2, n, values);
        let global = GlobalThreshold.flag(&scores, &cfg()).unwrap();
        let per = PerSeriesThreshold.flag(&scores, &cfg()).unwrap();
        assert!(!global.positions.contains(&(1, 30)));
        assert!(per.positions.contains(&(1, 30)));
    }

    #[test]
    fn registry_knows_both_modes() {
        let r = ThresholdRegistry::default();
        assert_eq!(r.names(), vec!["global", "per_series"]);
        assert_eq!(r.build("per_series").unwrap().name(), "per_series");
        assert_eq!(r.build("nope").err().unwrap().kind(), "config");
    }

    proptest! {
        #[test]
        fn flagged_set_is_scale_invariant(
            base in proptest::collection::vec(0.0f64..1.0, 30..80),
            spikes in proptest::collection::vec((0usize..80, 3.0f64..20.0), 0..4),
            c in 0.01f64..100.0,
        ) {
            let mut s = base.clone();
            for (k, v) in spikes {
                let n = s.len();
                s[k % n] = v;
            }
            let scores = ScoreMatrix::from_values(1, s.len(), s.iter().map(|&v| Some(v)).collect());
            let a = GlobalThreshold.flag(&scores, &cfg()).unwrap();
            let b = GlobalThreshold.flag(&scores.scaled(c), &cfg()).unwrap();
            prop_assert_eq!(a.positions, b.positions);
            if a.thresholds[0].is_finite() {
                prop_assert!((b.thresholds[0] - c * a.thresholds[0]).abs() <= 1e-9 * c * a.thresholds[0].abs().max(1.0));
            }
        }
    }
}
