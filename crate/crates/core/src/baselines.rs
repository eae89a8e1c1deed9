//! Forecast and detection metrics, and the two-stage statistical cleaners
//! that run once before training.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{fill_anomalies, FillRecord, FillStrategy, SeriesPanel};
use crate::error::{Result, SttsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub n_samples: usize,
    pub split: Split,
}

/// RMSE and MAE over `(prediction, truth)` pairs.
pub fn rmse_mae(pairs: &[(f64, f64)], split: Split) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(SttsError::Invalid("metrics need at least one prediction".into()));
    }
    let n = pairs.len() as f64;
    let (sq, abs) = pairs.iter().fold((0.0, 0.0), |(sq, abs), (p, y)| {
        let e = p - y;
        (sq + e * e, abs + e.abs())
    });
    Ok(MetricReport {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        n_samples: pairs.len(),
        split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Precision, recall and F1 of `positions` against a boolean label matrix.
/// Undefined ratios are reported as 0.
pub fn detection_quality(positions: &BTreeSet<(usize, usize)>, labels: &[Vec<bool>]) -> DetectionReport {
    let truth: BTreeSet<(usize, usize)> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(|(_, &l)| l).map(move |(t, _)| (i, t)))
        .collect();
    let tp = positions.intersection(&truth).count();
    let fp = positions.len() - tp;
    let fn_ = truth.len() - tp;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    DetectionReport {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    }
}

/// A detector that flags training-range points from the data alone.
pub trait Cleaner: Send + Sync {
    fn name(&self) -> &'static str;
    fn flag(&self, panel: &SeriesPanel, train_end: usize) -> BTreeSet<(usize, usize)>;
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Flags `|x - mu| > k sigma` with train-range statistics.
#[derive(Debug, Clone, Copy)]
pub struct ThreeSigma {
    pub k: f64,
}

impl Default for ThreeSigma {
    fn default() -> Self {
        Self { k: 3.0 }
    }
}

impl Cleaner for ThreeSigma {
    fn name(&self) -> &'static str {
        "three_sigma"
    }

    fn flag(&self, panel: &SeriesPanel, train_end: usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for i in 0..panel.n_series() {
            let xs = &panel.series(i)[..train_end];
            let (mu, sigma) = mean_std(xs);
            if sigma <= 1e-12 * mu.abs().max(1.0) {
                continue;
            }
            out.extend(
                xs.iter()
                    .enumerate()
                    .filter(|(_, &x)| (x - mu).abs() > self.k * sigma)
                    .map(|(t, _)| (i, t)),
            );
        }
        out
    }
}

/// EWMA control chart: `m_t = a x_t + (1 - a) m_{t-1}` and
/// `v_t = a (x_t - m_{t-1})^2 + (1 - a) v_{t-1}`, flagging
/// `|x_t - m_{t-1}| > k sqrt(v_{t-1})`. The recursion starts from the first
/// value and the train-range variance.
#[derive(Debug, Clone, Copy)]
pub struct Ewma {
    pub alpha: f64,
    pub k: f64,
}

impl Default for Ewma {
    fn default() -> Self {
        Self { alpha: 0.1, k: 3.0 }
    }
}

impl Ewma {
    /// `(m_{t-1}, v_{t-1})` in effect when `x_t` arrives, for `t >= 1`.
    pub fn states(&self, xs: &[f64], v0: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(xs.len());
        let (mut m, mut v) = (xs.first().copied().unwrap_or(0.0), v0);
        for &x in xs.iter().skip(1) {
            out.push((m, v));
            let r = x - m;
            m = self.alpha * x + (1.0 - self.alpha) * m;
            v = self.alpha * r * r + (1.0 - self.alpha) * v;
        }
        out
    }
}

impl Cleaner for Ewma {
    fn name(&self) -> &'static str {
        "ewma"
    }

    fn flag(&self, panel: &SeriesPanel, train_end: usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for i in 0..panel.n_series() {
            let xs = &panel.series(i)[..train_end];
            let (_, sigma) = mean_std(xs);
            for (k, (m, v)) in self.states(xs, sigma * sigma).into_iter().enumerate() {
                let t = k + 1;
                if (xs[t] - m).abs() > self.k * v.sqrt() {
                    out.insert((i, t));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanerParams {
    pub sigma_k: f64,
    pub ewma_alpha: f64,
    pub ewma_k: f64,
}

impl Default for CleanerParams {
    fn default() -> Self {
        Self {
            sigma_k: 3.0,
            ewma_alpha: 0.1,
            ewma_k: 3.0,
        }
    }
}

type CleanerCtor = fn(&CleanerParams) -> Box<dyn Cleaner>;

#[derive(Clone)]
pub struct CleanerRegistry {
    ctors: BTreeMap<&'static str, CleanerCtor>,
}

impl fmt::Debug for CleanerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ctors.keys()).finish()
    }
}

impl Default for CleanerRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("three_sigma", |p| Box::new(ThreeSigma { k: p.sigma_k }));
        r.register("ewma", |p| {
            Box::new(Ewma {
                alpha: p.ewma_alpha,
                k: p.ewma_k,
            })
        });
        r
    }
}

impl CleanerRegistry {
    pub fn register(&mut self, name: &'static str, ctor: CleanerCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: &CleanerParams) -> Result<Box<dyn Cleaner>> {
        if !(params.ewma_alpha > 0.0 && params.ewma_alpha <= 1.0) {
            return Err(SttsError::Config(format!("ewma_alpha = {} must lie in (0, 1]", params.ewma_alpha)));
        }
        self.ctors.get(name).map(|c| c(params)).ok_or_else(|| {
            SttsError::Config(format!("unknown cleaner {name:?}; known: {}", self.names().join(", ")))
        })
    }
}

/// Result of a two-stage cleaning pass.
#[derive(Debug, Clone)]
pub struct Cleaned {
    pub panel: SeriesPanel,
    pub positions: BTreeSet<(usize, usize)>,
    pub fills: Vec<FillRecord>,
}

/// Flags with `cleaner` and rewrites the flagged points with `fill`.
pub fn clean(panel: &SeriesPanel, cleaner: &dyn Cleaner, fill: &dyn FillStrategy, train_end: usize) -> Result<Cleaned> {
    let positions = cleaner.flag(panel, train_end);
    let mut out = panel.clone();
    let fills = fill_anomalies(&mut out, &positions, fill, train_end)?;
    Ok(Cleaned {
        panel: out,
        positions,
        fills,
    })
}

pub fn three_sigma_clean(panel: &SeriesPanel, fill: &dyn FillStrategy, train_end: usize) -> Result<Cleaned> {
    clean(panel, &ThreeSigma::default(), fill, train_end)
}

pub fn ewma_clean(panel: &SeriesPanel, alpha: f64, k: f64, fill: &dyn FillStrategy, train_end: usize) -> Result<Cleaned> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SttsError::Invalid(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    clean(panel, &Ewma { alpha, k }, fill, train_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, NeighborMeanFill, SyntheticSpec};
    use crate::tensor::Matrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn panel(rows: &[Vec<f64>]) -> SeriesPanel {
        let m = Matrix::from_rows(rows);
        let ids = (0..m.rows()).map(|i| format!("s{i}")).collect();
        SeriesPanel::new(m, ids, None).unwrap()
    }

    #[test]
    fn metric_examples() {
        let perfect = rmse_mae(&[(1.0, 1.0), (2.0, 2.0)], Split::Test).unwrap();
        assert_eq!((perfect.rmse, perfect.mae), (0.0, 0.0));
        let same = rmse_mae(&[(3.0, 0.0), (-3.0, 0.0)], Split::Test).unwrap();
        assert_eq!((same.rmse, same.mae), (3.0, 3.0));
        let mixed = rmse_mae(&[(0.0, 0.0), (4.0, 0.0)], Split::Valid).unwrap();
        assert!((mixed.rmse - 8f64.sqrt()).abs() < 1e-15);
        assert_eq!(mixed.mae, 2.0);
        assert_eq!(mixed.n_samples, 2);
        assert!(rmse_mae(&[], Split::Test).is_err());
    }

    #[test]
    fn detection_examples() {
        let labels = vec![vec![true, true, false, true]];
        let exact = detection_quality(&BTreeSet::from([(0, 0), (0, 1), (0, 3)]), &labels);
        assert_eq!((exact.precision, exact.recall, exact.f1), (1.0, 1.0, 1.0));
        let empty = detection_quality(&BTreeSet::new(), &labels);
        assert_eq!((empty.recall, empty.f1), (0.0, 0.0));
        let labels = vec![vec![true, true, false, true, false]];
        let r = detection_quality(&BTreeSet::from([(0, 0), (0, 1), (0, 2)]), &labels);
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives), (2, 1, 1));
        for v in [r.precision, r.recall, r.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn three_sigma_gaussian_tail_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p = panel(&[xs]);
        let rate = ThreeSigma::default().flag(&p, 10_000).len() as f64 / 10_000.0;
        assert!((rate - 0.0027).abs() <= 0.0015, "rate {rate}");
    }

    #[test]
    fn constant_series_is_never_flagged() {
        let p = panel(&[vec![2.0; 50]]);
        assert!(ThreeSigma::default().flag(&p, 50).is_empty());
        assert!(Ewma::default().flag(&p, 50).is_empty());
    }

    #[test]
    fn spike_is_flagged_by_three_sigma() {
        let mut xs: Vec<f64> = (0..200).map(|t| ((t * 7) % 13) as f64 / 13.0).collect();
        let (_, s) = mean_std(&xs);
        xs[90] += 10.0 * s;
        assert!(ThreeSigma::default().flag(&panel(&[xs]), 200).contains(&(0, 90)));
    }

    #[test]
    fn ewma_with_alpha_one_tracks_the_series() {
        let xs = [1.0, 4.0, 2.0, 7.0, 7.5];
        let states = Ewma { alpha: 1.0, k: 3.0 }.states(&xs, 1.0);
        for (k, (m, _)) in states.iter().enumerate() {
            assert_eq!(*m, xs[k]);
            // residual against the previous mean is the first difference
            assert_eq!(xs[k + 1] - m, xs[k + 1] - xs[k]);
        }
    }

    #[test]
    fn ewma_flags_a_large_step() {
        // direct simulation of the recursion on a noisy level with a 20 sigma step
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut xs: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut rng)).collect();
        for x in &mut xs[150..] {
            *x += 20.0;
        }
        let flags = Ewma::default().flag(&panel(&[xs.clone()]), 150);
        let p = panel(&[xs]);
        let all = Ewma::default().flag(&p, 300);
        assert!(all.contains(&(0, 150)));
        assert!(!flags.contains(&(0, 149)));
    }

    #[test]
    fn three_sigma_is_idempotent_when_fills_land_inside_the_band() {
        let spec = SyntheticSpec {
            n_series: 5,
            n_timestamps: 200,
            anomalies: vec![crate::data::AnomalySpec::spike(8.0, 5)],
            ..SyntheticSpec::default()
        };
        let mut p = generate_synthetic(&spec, 3).unwrap();
        let te = spec.train_end();
        p.normalize(te).unwrap();
        let once = three_sigma_clean(&p, &NeighborMeanFill { k: 3 }, te).unwrap();
        assert!(!once.positions.is_empty());
        for i in 0..p.n_series() {
            let (mu, sigma) = mean_std(&p.series(i)[..te]);
            let inside = |x: f64| (x - mu).abs() <= 3.0 * sigma;
            let fills_inside = once.fills.iter().filter(|f| f.series == i).all(|f| inside(f.new_value));
            if fills_inside {
                // a second pass with the first pass' statistics flags nothing
                assert!(once.panel.series(i)[..te].iter().all(|&x| inside(x)), "series {i}");
            }
        }
    }

    #[test]
    fn registry_builds_by_name() {
        let r = CleanerRegistry::default();
        assert_eq!(r.names(), vec!["ewma", "three_sigma"]);
        assert!(r.build("ewma", &CleanerParams::default()).is_ok());
        assert!(r.build("x", &CleanerParams::default()).is_err());
        let bad = CleanerParams {
            ewma_alpha: 0.0,
            ..CleanerParams::default()
        };
        assert!(r.build("ewma", &bad).is_err());
    }

    proptest! {
        #[test]
        fn detection_counts_are_consistent(
            labels in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 8), 1..4),
            picks in proptest::collection::btree_set((0usize..4, 0usize..8), 0..10),
        ) {
            let n = labels.len();
            let positions: BTreeSet<(usize, usize)> = picks.into_iter().filter(|p| p.0 < n).collect();
            let r = detection_quality(&positions, &labels);
            let n_labels = labels.iter().flatten().filter(|&&l| l).count();
            prop_assert_eq!(r.true_positives + r.false_negatives, n_labels);
            prop_assert_eq!(r.true_positives + r.false_positives, positions.len());
            prop_assert!((0.0..=1.0).contains(&r.f1));
        }

        #[test]
        fn rmse_equals_mae_for_equal_magnitudes(m in 0.0f64..10.0, signs in proptest::collection::vec(any::<bool>(), 1..20)) {
            let pairs: Vec<(f64, f64)> = signs.iter().map(|&s| (if s { m } else { -m }, 0.0)).collect();
            let r = rmse_mae(&pairs, Split::Test).unwrap();
            prop_assert!((r.rmse - r.mae).abs() < 1e-12);
            prop_assert!(r.rmse >= 0.0 && r.mae >= 0.0);
        }
    }
}
