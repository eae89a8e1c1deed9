//! Seeded synthetic panels with community structure and labelled anomalies.
//!
//! Each series is a level plus a scaled community pattern indexed by
//! `t mod period`, plus trend and noise, where the noise mixes a community-shared component with an
//! idiosyncratic one. The entity graph is a stochastic block model over the
//! same communities. Anomalies are injected into the training range only and
//! their magnitudes are expressed in units of the clean series' standard
//! deviation over that range.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::panel::SeriesPanel;
use crate::error::{Result, SttsError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    Dip,
    LevelShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// In units of the clean series' standard deviation.
    pub magnitude: f64,
    pub count: usize,
    /// Run length for level shifts; spikes and dips always cover one point.
    pub length: usize,
}

impl AnomalySpec {
    pub fn spike(magnitude: f64, count: usize) -> Self {
        Self {
            kind: AnomalyKind::Spike,
            magnitude,
            count,
            length: 1,
        }
    }

    pub fn dip(magnitude: f64, count: usize) -> Self {
        Self {
            kind: AnomalyKind::Dip,
            magnitude,
            count,
            length: 1,
        }
    }

    fn span(&self) -> usize {
        match self.kind {
            AnomalyKind::LevelShift => self.length.max(1),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_series: usize,
    pub n_timestamps: usize,
    pub period: usize,
    pub seasonal_amplitude: f64,
    pub trend_scale: f64,
    pub noise_scale: f64,
    /// Share of noise variance coming from the community component, in [0, 1].
    pub cross_corr_strength: f64,
    pub n_communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Anomalies land in `[inject_start, round(train_fraction * T))`.
    pub train_fraction: f64,
    pub inject_start: usize,
    pub anomalies: Vec<AnomalySpec>,
}

impl Default for SyntheticSpec {
    /// The benchmark panel: 20 series, 400 steps, weekly seasonality and 1%
    /// of all points contaminated with 6σ spikes and dips.
    fn default() -> Self {
        Self {
            n_series: 20,
            n_timestamps: 400,
            period: 7,
            seasonal_amplitude: 1.0,
            trend_scale: 0.5,
            noise_scale: 0.2,
            cross_corr_strength: 0.5,
            n_communities: 4,
            p_in: 0.6,
            p_out: 0.05,
            train_fraction: 0.7,
            inject_start: 16,
            anomalies: vec![AnomalySpec::spike(6.0, 40), AnomalySpec::dip(6.0, 40)],
        }
    }
}

impl SyntheticSpec {
    pub fn train_end(&self) -> usize {
        (self.n_timestamps as f64 * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SttsError::Config(format!("synthetic spec: {m}")));
        if self.n_series == 0 || self.n_timestamps < 4 {
            return bad("need at least one series and four timestamps");
        }
        if self.period == 0 {
            return bad("period must be positive");
        }
        if self.n_communities == 0 {
            return bad("n_communities must be positive");
        }
        for (name, v) in [
            ("seasonal_amplitude", self.seasonal_amplitude),
            ("trend_scale", self.trend_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be a nonnegative real"));
            }
        }
        for (name, v) in [
            ("cross_corr_strength", self.cross_corr_strength),
            ("p_in", self.p_in),
            ("p_out", self.p_out),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.inject_start >= self.train_end() && self.anomalies.iter().any(|a| a.count > 0) {
            return bad("inject_start leaves no room for anomalies in the training range");
        }
        for a in &self.anomalies {
            if !(a.magnitude >= 0.0 && a.magnitude.is_finite()) {
                return bad("anomaly magnitude must be a nonnegative real");
            }
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SeriesPanel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, t_len, period) = (spec.n_series, spec.n_timestamps, spec.period);
    let train_end = spec.train_end();

    let patterns: Vec<Vec<f64>> = (0..spec.n_communities)
        .map(|_| {
            let a1 = rng.gen_range(0.6..1.0);
            let a2 = rng.gen_range(0.2..0.5);
            let ph1 = rng.gen_range(0.0..2.0 * PI);
            let ph2 = rng.gen_range(0.0..2.0 * PI);
            (0..period)
                .map(|k| {
                    let x = 2.0 * PI * k as f64 / period as f64;
                    a1 * (x + ph1).sin() + a2 * (2.0 * x + ph2).sin()
                })
                .collect()
        })
        .collect();
    let community: Vec<usize> = (0..n).map(|i| i % spec.n_communities).collect();

    let shared_noise: Vec<Vec<f64>> = (0..spec.n_communities)
        .map(|_| (0..t_len).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let rho = spec.cross_corr_strength;
    let mut clean = Matrix::zeros(n, t_len);
    for i in 0..n {
        let c = community[i];
        let level = rng.gen_range(5.0..15.0);
        let amp = spec.seasonal_amplitude * rng.gen_range(0.8..1.2);
        let slope = spec.trend_scale * rng.gen_range(-1.0..1.0) / t_len as f64;
        for t in 0..t_len {
            let own: f64 = StandardNormal.sample(&mut rng);
            let noise = spec.noise_scale * (rho.sqrt() * shared_noise[c][t] + (1.0 - rho).sqrt() * own);
            clean.set(i, t, level + amp * patterns[c][t % period] + slope * t as f64 + noise);
        }
    }

    let mut graph = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if community[i] == community[j] { spec.p_in } else { spec.p_out };
            if rng.gen_bool(p) {
                graph.set(i, j, 1.0);
                graph.set(j, i, 1.0);
            }
        }
    }

    let sigma: Vec<f64> = (0..n)
        .map(|i| {
            let row = &clean.row(i)[..train_end];
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64).sqrt()
        })
        .collect();

    let mut values = clean;
    let mut labels = vec![vec![false; t_len]; n];
    let mut occupied: BTreeSet<(usize, usize)> = BTreeSet::new();
    let capacity = n * train_end.saturating_sub(spec.inject_start);
    let demand: usize = spec.anomalies.iter().map(|a| a.count * a.span()).sum();
    if demand > capacity {
        return Err(SttsError::Invalid(format!(
            "anomaly count exceeds training-range capacity: {demand} points requested, {capacity} available"
        )));
    }
    for a in &spec.anomalies {
        let span = a.span();
        if span > train_end - spec.inject_start {
            return Err(SttsError::Invalid("level shift longer than the injection range".into()));
        }
        // candidate starts whose whole run is free
        let mut candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (spec.inject_start..=train_end - span).map(move |t| (i, t)))
            .filter(|&(i, t)| (t..t + span).all(|s| !occupied.contains(&(i, s))))
            .collect();
        candidates.shuffle(&mut rng);
        let mut placed = 0;
        for (i, t0) in candidates {
            if placed == a.count {
                break;
            }
            if (t0..t0 + span).any(|s| occupied.contains(&(i, s))) {
                continue;
            }
            let delta = match a.kind {
                AnomalyKind::Spike => a.magnitude * sigma[i],
                AnomalyKind::Dip => -a.magnitude * sigma[i],
                AnomalyKind::LevelShift => {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * a.magnitude * sigma[i]
                }
            };
            for s in t0..t0 + span {
                values.set(i, s, values.get(i, s) + delta);
                labels[i][s] = true;
                occupied.insert((i, s));
            }
            placed += 1;
        }
        if placed < a.count {
            return Err(SttsError::Invalid(format!(
                "anomaly count exceeds training-range capacity for {:?}",
                a.kind
            )));
        }
    }

    let ids = (0..n).map(|i| format!("s{i:03}")).collect();
    SeriesPanel::new(values, ids, Some(graph))?.with_labels(labels)
}

/// The clean values the generator would produce for `spec` and `seed` with no
/// anomalies injected.
pub fn clean_reference(spec: &SyntheticSpec, seed: u64) -> Result<SeriesPanel> {
    let mut clean_spec = spec.clone();
    clean_spec.anomalies.clear();
    generate_synthetic(&clean_spec, seed)
}
