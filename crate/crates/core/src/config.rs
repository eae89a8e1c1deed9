//! Flat `key = value` run configuration.
//!
//! Values resolve as defaults, then the config file, then `--set key=value`
//! overrides. Unknown keys are rejected at every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::CleanerParams;
use crate::data::{AnomalyKind, AnomalySpec, FillParams, FillRegistry, MissingPolicy, SplitSpec, SyntheticSpec};
use crate::ead::{ThresholdConfig, ThresholdRegistry, TrainConfig};
use crate::error::{Result, SttsError};
use crate::model::{Components, ModelConfig};
use crate::params::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // files
    pub panel_path: PathBuf,
    pub graph_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub missing: MissingPolicy,

    // synthetic generator
    pub n_series: usize,
    pub n_timestamps: usize,
    pub period: usize,
    pub seasonal_amplitude: f64,
    pub trend_scale: f64,
    pub noise_scale: f64,
    pub cross_corr_strength: f64,
    pub n_communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub inject_start: usize,
    pub spike_count: usize,
    pub spike_magnitude: f64,
    pub dip_count: usize,
    pub dip_magnitude: f64,
    pub level_shift_count: usize,
    pub level_shift_magnitude: f64,
    pub level_shift_length: usize,

    // split
    pub train_fraction: f64,
    pub valid_fraction: f64,

    // model
    pub window: usize,
    pub n_aux: usize,
    pub d_time: usize,
    pub d_spat: usize,
    pub d_attn: usize,
    pub encoder_hidden: usize,
    pub lstm_hidden: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub leaky_slope: f64,
    pub gamma: f64,
    pub embedding_init_scale: f64,
    pub use_graph: bool,
    pub aux_selection: bool,
    pub spatial_attention: bool,
    pub temporal_attention: bool,
    pub transformer: bool,
    pub recurrent: bool,

    // training and detection
    pub epochs: usize,
    pub ead: bool,
    pub eta: usize,
    pub ead_start: usize,
    pub delta: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub threshold_mode: String,
    pub z_min: f64,
    pub z_max: f64,
    pub z_step: f64,
    pub prune: bool,
    pub prune_min_decrease: f64,
    pub fill: String,
    pub fill_k: usize,
    pub lowess_span: usize,
    pub fill_period: usize,
    pub seed: u64,

    // two-stage baselines
    pub baseline_fill: String,
    pub sigma_k: f64,
    pub ewma_alpha: f64,
    pub ewma_k: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let c = CleanerParams::default();
        Self {
            panel_path: PathBuf::from("data/panel.csv"),
            graph_path: None,
            labels_path: None,
            output_dir: PathBuf::from("runs/default"),
            missing: MissingPolicy::Reject,

            n_series: syn.n_series,
            n_timestamps: syn.n_timestamps,
            period: syn.period,
            seasonal_amplitude: syn.seasonal_amplitude,
            trend_scale: syn.trend_scale,
            noise_scale: syn.noise_scale,
            cross_corr_strength: syn.cross_corr_strength,
            n_communities: syn.n_communities,
            p_in: syn.p_in,
            p_out: syn.p_out,
            inject_start: syn.inject_start,
            spike_count: 40,
            spike_magnitude: 6.0,
            dip_count: 40,
            dip_magnitude: 6.0,
            level_shift_count: 0,
            level_shift_magnitude: 4.0,
            level_shift_length: 5,

            train_fraction: 0.7,
            valid_fraction: 0.1,

            window: m.window,
            n_aux: m.n_aux,
            d_time: m.d_time,
            d_spat: m.d_spat,
            d_attn: m.d_attn,
            encoder_hidden: m.encoder_hidden,
            lstm_hidden: m.lstm_hidden,
            heads: m.heads,
            ff_hidden: m.ff_hidden,
            leaky_slope: m.leaky_slope,
            gamma: m.gamma,
            embedding_init_scale: m.embedding_init_scale,
            use_graph: m.use_graph,
            aux_selection: true,
            spatial_attention: true,
            temporal_attention: true,
            transformer: true,
            recurrent: true,

            epochs: t.epochs,
            ead: true,
            eta: t.eta.unwrap_or(5),
            ead_start: t.ead_start,
            delta: t.delta,
            beta: t.beta,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            grad_clip: t.grad_clip,
            threshold_mode: t.threshold_mode.clone(),
            z_min: t.threshold.z_min,
            z_max: t.threshold.z_max,
            z_step: t.threshold.z_step,
            prune: t.threshold.prune,
            prune_min_decrease: t.threshold.min_decrease,
            fill: t.fill.clone(),
            fill_k: t.fill_params.k,
            lowess_span: t.fill_params.span,
            fill_period: t.fill_params.period,
            seed: t.seed,

            baseline_fill: "mean".into(),
            sigma_k: c.sigma_k,
            ewma_alpha: c.ewma_alpha,
            ewma_k: c.ewma_k,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> SttsError {
    SttsError::Config(msg.into())
}

fn parse_scalar(raw: &str) -> toml::Value {
    // reuse the TOML grammar for numbers, booleans and quoted strings; any
    // other text is taken as a bare string
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| cfg_err(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SttsError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))
    }

    /// Resolves defaults, an optional file and `key=value` overrides, then
    /// validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let mut table = toml::Table::try_from(&*self).map_err(|e| cfg_err(e.to_string()))?;
        let optional_path = matches!(key, "graph_path" | "labels_path");
        if !table.contains_key(key) && !optional_path {
            return Err(cfg_err(format!("unknown config key {key:?}")));
        }
        let raw = raw.trim();
        if optional_path && (raw.is_empty() || raw == "none") {
            // absent keys fall back to the default, so clear the field directly
            match key {
                "graph_path" => self.graph_path = None,
                _ => self.labels_path = None,
            }
            return Ok(());
        } else {
            let mut value = parse_scalar(raw);
            // keep string-typed keys as strings even when the text looks numeric
            if let Some(toml::Value::String(_)) = table.get(key) {
                if !value.is_str() {
                    value = toml::Value::String(raw.trim_matches('"').to_string());
                }
            }
            if optional_path && !value.is_str() {
                value = toml::Value::String(raw.to_string());
            }
            table.insert(key.to_string(), value);
        }
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(format!("override {key}: {}", e.message())))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic_spec().validate()?;
        if !(self.train_fraction > 0.0 && self.valid_fraction > 0.0 && self.train_fraction + self.valid_fraction < 1.0) {
            return Err(cfg_err("split fractions must be positive and leave room for a test range"));
        }
        if self.window < 2 {
            return Err(cfg_err("window must be at least 2"));
        }
        let model = self.model_config();
        model.validate(self.n_aux.max(1))?;
        self.train_config().validate()?;
        if self.fill_k == 0 || self.lowess_span < 2 || self.fill_period == 0 {
            return Err(cfg_err("fill_k, fill_period must be positive and lowess_span at least 2"));
        }
        if !FillRegistry::with_builtins().contains(&self.baseline_fill) {
            return Err(cfg_err(format!("unknown baseline_fill {:?}", self.baseline_fill)));
        }
        if !ThresholdRegistry::default().contains(&self.threshold_mode) {
            return Err(cfg_err(format!("unknown threshold_mode {:?}", self.threshold_mode)));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(cfg_err("ewma_alpha must lie in (0, 1]"));
        }
        if !(self.sigma_k > 0.0 && self.ewma_k > 0.0) {
            return Err(cfg_err("sigma_k and ewma_k must be positive"));
        }
        if self.gamma >= 1.0 {
            return Err(cfg_err("gamma must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut anomalies = Vec::new();
        if self.spike_count > 0 {
            anomalies.push(AnomalySpec::spike(self.spike_magnitude, self.spike_count));
        }
        if self.dip_count > 0 {
            anomalies.push(AnomalySpec::dip(self.dip_magnitude, self.dip_count));
        }
        if self.level_shift_count > 0 {
            anomalies.push(AnomalySpec {
                kind: AnomalyKind::LevelShift,
                magnitude: self.level_shift_magnitude,
                count: self.level_shift_count,
                length: self.level_shift_length,
            });
        }
        SyntheticSpec {
            n_series: self.n_series,
            n_timestamps: self.n_timestamps,
            period: self.period,
            seasonal_amplitude: self.seasonal_amplitude,
            trend_scale: self.trend_scale,
            noise_scale: self.noise_scale,
            cross_corr_strength: self.cross_corr_strength,
            n_communities: self.n_communities,
            p_in: self.p_in,
            p_out: self.p_out,
            train_fraction: self.train_fraction,
            inject_start: self.inject_start,
            anomalies,
        }
    }

    pub fn split_for(&self, n_timestamps: usize) -> Result<SplitSpec> {
        let split = SplitSpec::from_fractions(n_timestamps, self.train_fraction, self.valid_fraction)?;
        split.validate(self.window, n_timestamps)?;
        Ok(split)
    }

    pub fn components(&self) -> Components {
        Components {
            aux_selection: self.aux_selection,
            spatial_attention: self.spatial_attention,
            temporal_attention: self.temporal_attention,
            transformer: self.transformer,
            recurrent: self.recurrent,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            window: self.window,
            n_aux: self.n_aux,
            d_time: self.d_time,
            d_spat: self.d_spat,
            d_attn: self.d_attn,
            encoder_hidden: self.encoder_hidden,
            lstm_hidden: self.lstm_hidden,
            heads: self.heads,
            ff_hidden: self.ff_hidden,
            leaky_slope: self.leaky_slope,
            gamma: self.gamma,
            embedding_init_scale: self.embedding_init_scale,
            use_graph: self.use_graph,
            components: self.components(),
        }
    }

    pub fn fill_params(&self) -> FillParams {
        FillParams {
            k: self.fill_k,
            span: self.lowess_span,
            period: self.fill_period,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            eta: self.ead.then_some(self.eta),
            ead_start: self.ead_start,
            delta: self.delta,
            beta: self.beta,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            grad_clip: self.grad_clip,
            threshold: ThresholdConfig {
                z_min: self.z_min,
                z_max: self.z_max,
                z_step: self.z_step,
                prune: self.prune,
                min_decrease: self.prune_min_decrease,
            },
            threshold_mode: self.threshold_mode.clone(),
            fill: self.fill.clone(),
            fill_params: self.fill_params(),
            seed: self.seed,
        }
    }

    pub fn cleaner_params(&self) -> CleanerParams {
        CleanerParams {
            sigma_k: self.sigma_k,
            ewma_alpha: self.ewma_alpha,
            ewma_k: self.ewma_k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml_str("windw = 3").unwrap_err();
        assert_eq!(e.kind(), "config");
        let mut c = RunConfig::default();
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("window").is_err());
    }

    #[test]
    fn precedence_is_cli_then_file_then_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "window = 10\ndelta = 0.2\nfill = \"mean\"\n").unwrap();
        let c = RunConfig::resolve(Some(&path), &["delta=0.8".into(), "threshold_mode=global".into()]).unwrap();
        assert_eq!(c.window, 10);
        assert_eq!(c.delta, 0.8);
        assert_eq!(c.fill, "mean");
        assert_eq!(c.threshold_mode, "global");
        assert_eq!(c.epochs, RunConfig::default().epochs);
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        for o in ["delta=1.5", "gamma=1.0", "n_aux=0", "fill=spline", "threshold_mode=local", "ewma_alpha=0"] {
            let mut c = RunConfig::default();
            c.apply_override(o).unwrap();
            assert!(c.validate().is_err(), "{o}");
        }
        let mut c = RunConfig::default();
        assert!(c.apply_override("window=abc").is_err());
    }

    #[test]
    fn optional_paths_can_be_cleared_and_set() {
        let mut c = RunConfig::default();
        c.apply_override("graph_path=none").unwrap();
        assert_eq!(c.graph_path, None);
        c.apply_override("graph_path=g.csv").unwrap();
        assert_eq!(c.graph_path, Some(PathBuf::from("g.csv")));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.apply_override("seed=42").unwrap();
        c.apply_override("output_dir=out/x").unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn no_ead_disables_the_schedule() {
        let mut c = RunConfig::default();
        c.apply_override("ead=false").unwrap();
        assert!(c.train_config().ead_epochs().is_empty());
    }
}
