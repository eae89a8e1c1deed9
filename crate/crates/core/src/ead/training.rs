//! The alternating train / detect / fill loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detect::{detect, AnomalyReport};
use super::ledger::ResidualLedger;
use super::threshold::{ThresholdConfig, ThresholdRegistry};
use crate::autodiff::Graph;
use crate::baselines::{rmse_mae, MetricReport, Split};
use crate::data::{fill_anomalies, make_windows, FillParams, FillRegistry, SeriesPanel, SplitSpec, WindowSample};
use crate::error::{Result, SttsError};
use crate::model::{ModelConfig, Stts};
use crate::params::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Detection period; `None` trains the plain forecaster.
    pub eta: Option<usize>,
    /// Epoch from which the detection schedule counts.
    pub ead_start: usize,
    pub delta: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub threshold: ThresholdConfig,
    pub threshold_mode: String,
    pub fill: String,
    pub fill_params: FillParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            eta: Some(5),
            ead_start: 0,
            delta: 0.5,
            beta: 0.5,
            batch_size: 128,
            adam: AdamConfig::default(),
            grad_clip: 5.0,
            threshold: ThresholdConfig::default(),
            threshold_mode: "per_series".into(),
            fill: "periodic_mean".into(),
            fill_params: FillParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SttsError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.eta == Some(0) {
            return bad("eta must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("delta = {} must lie in [0, 1]", self.delta));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta = {} must lie in [0, 1]", self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.adam.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be nonnegative".into());
        }
        self.threshold.validate()?;
        if !ThresholdRegistry::default().contains(&self.threshold_mode) {
            return bad(format!("unknown threshold mode {:?}", self.threshold_mode));
        }
        if !FillRegistry::with_builtins().contains(&self.fill) {
            return bad(format!("unknown fill strategy {:?}", self.fill));
        }
        Ok(())
    }

    /// Whether a detection round follows the training of epoch `e`.
    pub fn is_ead_epoch(&self, e: usize) -> bool {
        match self.eta {
            Some(eta) => e >= self.ead_start && (e - self.ead_start) % eta == 0,
            None => false,
        }
    }

    /// Epochs after which detection runs.
    pub fn ead_epochs(&self) -> Vec<usize> {
        (0..self.epochs).filter(|&e| self.is_ead_epoch(e)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_rmse: f64,
    pub valid_mae: f64,
    pub train_samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub model: Stts,
    pub reports: Vec<AnomalyReport>,
    pub history: Vec<EpochMetrics>,
    /// Training panel after every rewrite.
    pub panel: SeriesPanel,
}

impl TrainingResult {
    /// Union of the positions flagged in every round.
    pub fn detected(&self) -> BTreeSet<(usize, usize)> {
        self.reports.iter().flat_map(|r| r.positions.iter().copied()).collect()
    }
}

/// One evaluation-mode pass; returns metrics in the panel's original units.
pub fn evaluate(model: &Stts, panel: &SeriesPanel, samples: &[WindowSample], split: Split) -> Result<MetricReport> {
    let selections = model.selections()?;
    let p = model.config().window;
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.predict(panel, s, &selections[s.target_index]);
        let i = s.target_index;
        pairs.push((panel.denormalize(i, out.prediction), panel.denormalize(i, s.label(panel))));
        debug_assert_eq!(out.reconstruction.len(), p);
    }
    if pairs.iter().any(|(a, _)| !a.is_finite()) {
        return Err(SttsError::Numerical("non-finite prediction during evaluation".into()));
    }
    rmse_mae(&pairs, split)
}

/// Frozen-parameter residual sweep over `samples` of `panel`.
pub fn residual_sweep(model: &Stts, panel: &SeriesPanel, samples: &[WindowSample]) -> Result<ResidualLedger> {
    let selections = model.selections()?;
    let p = model.config().window;
    let mut ledger = ResidualLedger::new(panel.n_series(), panel.n_timestamps());
    for s in samples {
        let out = model.predict(panel, s, &selections[s.target_index]);
        ledger.accumulate(s, s.window(panel, p), s.label(panel), &out)?;
    }
    ledger.finalize();
    Ok(ledger)
}

/// Trains on `panel` (already normalized) and runs detection rounds on the
/// configured schedule. Validation always reads the panel as given; only a
/// private copy of the training range is rewritten.
pub fn run_training(
    panel: &SeriesPanel,
    split: &SplitSpec,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainingResult> {
    run_training_with(panel, split, model_config, config, |_| {})
}

/// [`run_training`] with a callback after every epoch.
pub fn run_training_with(
    panel: &SeriesPanel,
    split: &SplitSpec,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainingResult> {
    config.validate()?;
    let p = model_config.window;
    split.validate(p, panel.n_timestamps())?;
    let fill = FillRegistry::with_builtins().build(&config.fill, &config.fill_params)?;
    let mode = ThresholdRegistry::default().build(&config.threshold_mode)?;
    let mut model = Stts::new(model_config.clone(), panel.n_series(), panel.graph(), config.seed)?;
    let mut adam = Adam::new(model.store(), config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f5a_u64);

    let valid = make_windows(panel, split, p)?.valid;
    let mut train_panel = panel.clone();
    let mut train = make_windows(&train_panel, split, p)?.train;
    let mut reports = Vec::new();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let selections = model.selections()?;
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zero_grads();
            let mut encoded: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for s in batch {
                let sel = &selections[s.target_index];
                let block = s.block(&train_panel, sel, p);
                let mut g = Graph::new(model.store());
                let vars = model.forward(&mut g, &block, sel);
                let lv = model.loss(&mut g, &vars, s.window(&train_panel, p), s.label(&train_panel), config.beta);
                let l = g.value(lv.total).item();
                if !l.is_finite() {
                    return Err(SttsError::Diverged {
                        epoch,
                        detail: format!("non-finite loss on sample ({}, {})", s.target_index, s.timestamp),
                    });
                }
                loss_sum += l;
                let root = g.scale(lv.total, scale);
                g.backward(root, &mut grads);
                encoded
                    .entry(s.target_index)
                    .or_default()
                    .push(g.value(vars.encoded).row(0).to_vec());
            }
            if !grads.is_finite() {
                return Err(SttsError::Diverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            if config.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > config.grad_clip {
                    grads.scale(config.grad_clip / norm);
                }
            }
            adam.step(model.store_mut(), &grads);
            model.momentum_mut().update_from_outputs(&encoded)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let v = evaluate(&model, panel, &valid, Split::Valid)?;
        if !v.rmse.is_finite() {
            return Err(SttsError::Diverged {
                epoch,
                detail: "non-finite validation error".into(),
            });
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            valid_rmse: v.rmse,
            valid_mae: v.mae,
            train_samples: train.len(),
        };
        on_epoch(&metrics);
        history.push(metrics);

        if config.is_ead_epoch(epoch) {
            let ledger = residual_sweep(&model, &train_panel, &train)?;
            let mut report = detect(&ledger, config.delta, mode.as_ref(), &config.threshold, split.train_end, epoch)?;
            report.fills = fill_anomalies(&mut train_panel, &report.positions, fill.as_ref(), split.train_end)?;
            reports.push(report);
            train = make_windows(&train_panel, split, p)?.train;
            if train.is_empty() {
                return Err(SttsError::Invalid("every training sample was removed".into()));
            }
        }
    }

    Ok(TrainingResult {
        model,
        reports,
        history,
        panel: train_panel,
    })
}

/// Writes `epoch,train_loss,valid_rmse,valid_mae`.
pub fn write_history(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SttsError::Parse(format!("{}: {e}", path.display())))?;
    w.write_record(["epoch", "train_loss", "valid_rmse", "valid_mae"])
        .map_err(|e| SttsError::Parse(e.to_string()))?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.valid_rmse.to_string(),
            h.valid_mae.to_string(),
        ])
        .map_err(|e| SttsError::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| SttsError::io(path, e))
}
