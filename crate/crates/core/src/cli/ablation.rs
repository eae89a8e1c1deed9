//! Arm matrix for controlled comparisons. Every arm derives its run from the
//! same base configuration, panel and seed.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::baselines::{clean, detection_quality, CleanerRegistry, Split};
use crate::config::RunConfig;
use crate::data::{make_windows, FillRegistry, SeriesPanel, SplitSpec};
use crate::ead::{evaluate, run_training};
use crate::error::{Result, SttsError};

/// One output row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub group: String,
    pub arm: String,
    pub rmse: f64,
    pub mae: f64,
    /// Cumulative detection F1; absent without labels or without detection.
    pub detection_f1: Option<f64>,
}

/// `(rmse, mae, detection_f1)` of one trained run.
type Scored = (f64, f64, Option<f64>);

/// Shared inputs plus a memo so arms that resolve to the same run train once.
pub struct AblationContext<'a> {
    pub panel: &'a SeriesPanel,
    pub split: SplitSpec,
    pub base: RunConfig,
    memo: RefCell<BTreeMap<String, Scored>>,
}

impl<'a> AblationContext<'a> {
    pub fn new(panel: &'a SeriesPanel, split: SplitSpec, base: RunConfig) -> Self {
        Self {
            panel,
            split,
            base,
            memo: RefCell::new(BTreeMap::new()),
        }
    }

    fn f1_of(&self, positions: &std::collections::BTreeSet<(usize, usize)>) -> Option<f64> {
        self.panel.anomaly_labels().map(|l| detection_quality(positions, l).f1)
    }

    /// Trains under `cfg`, optionally on a cleaned copy, and scores the test
    /// range of the original panel.
    fn train_and_score(&self, cfg: &RunConfig, cleaner: Option<&str>) -> Result<Scored> {
        let key = format!("{}\ncleaner={cleaner:?}", cfg.to_toml());
        if let Some(hit) = self.memo.borrow().get(&key) {
            return Ok(*hit);
        }
        let (train_panel, cleaned_f1) = match cleaner {
            Some(name) => {
                let c = CleanerRegistry::default().build(name, &cfg.cleaner_params())?;
                let fill = FillRegistry::with_builtins().build(&cfg.baseline_fill, &cfg.fill_params())?;
                let out = clean(self.panel, c.as_ref(), fill.as_ref(), self.split.train_end)?;
                let f1 = self.f1_of(&out.positions);
                (out.panel, f1)
            }
            None => (self.panel.clone(), None),
        };
        let result = run_training(&train_panel, &self.split, &cfg.model_config(), &cfg.train_config())?;
        let test = make_windows(self.panel, &self.split, cfg.window)?.test;
        let m = evaluate(&result.model, self.panel, &test, Split::Test)?;
        let f1 = match cleaner {
            Some(_) => cleaned_f1,
            None if cfg.ead => self.f1_of(&result.detected()),
            None => None,
        };
        let out = (m.rmse, m.mae, f1);
        self.memo.borrow_mut().insert(key, out);
        Ok(out)
    }
}

pub trait AblationArm {
    fn group(&self) -> &'static str;
    fn name(&self) -> String;
    fn run(&self, ctx: &AblationContext<'_>) -> Result<ArmResult>;
}

fn row(arm: &dyn AblationArm, (rmse, mae, detection_f1): Scored) -> ArmResult {
    ArmResult {
        group: arm.group().into(),
        arm: arm.name(),
        rmse,
        mae,
        detection_f1,
    }
}

/// The full model, or the full model with one component switched off.
pub struct ComponentArm {
    pub component: Option<&'static str>,
}

impl AblationArm for ComponentArm {
    fn group(&self) -> &'static str {
        "component"
    }

    fn name(&self) -> String {
        self.component.map_or_else(|| "full".into(), |c| format!("w/o {c}"))
    }

    fn run(&self, ctx: &AblationContext<'_>) -> Result<ArmResult> {
        let mut cfg = ctx.base.clone();
        if let Some(c) = self.component {
            cfg.apply_override(&format!("{c}=false"))?;
        }
        Ok(row(self, ctx.train_and_score(&cfg, None)?))
    }
}

pub struct DeltaArm {
    pub delta: f64,
}

impl AblationArm for DeltaArm {
    fn group(&self) -> &'static str {
        "delta"
    }

    fn name(&self) -> String {
        format!("delta={}", self.delta)
    }

    fn run(&self, ctx: &AblationContext<'_>) -> Result<ArmResult> {
        let mut cfg = ctx.base.clone();
        cfg.delta = self.delta;
        cfg.ead = true;
        Ok(row(self, ctx.train_and_score(&cfg, None)?))
    }
}

pub struct FillArm {
    pub fill: &'static str,
}

impl AblationArm for FillArm {
    fn group(&self) -> &'static str {
        "fill"
    }

    fn name(&self) -> String {
        format!("fill={}", self.fill)
    }

    fn run(&self, ctx: &AblationContext<'_>) -> Result<ArmResult> {
        let mut cfg = ctx.base.clone();
        cfg.fill = self.fill.into();
        cfg.ead = true;
        Ok(row(self, ctx.train_and_score(&cfg, None)?))
    }
}

/// Forecaster with and without embedded detection, and the two-stage
/// clean-then-train baselines.
pub enum MethodArm {
    Plain,
    Embedded,
    TwoStage { cleaner: &'static str, label: &'static str },
}

impl AblationArm for MethodArm {
    fn group(&self) -> &'static str {
        "method"
    }

    fn name(&self) -> String {
        match self {
            MethodArm::Plain => "STTS".into(),
            MethodArm::Embedded => "STTS-EAD".into(),
            MethodArm::TwoStage { label, .. } => format!("STTS-{label}"),
        }
    }

    fn run(&self, ctx: &AblationContext<'_>) -> Result<ArmResult> {
        let mut cfg = ctx.base.clone();
        let cleaner = match self {
            MethodArm::Plain => {
                cfg.ead = false;
                None
            }
            MethodArm::Embedded => {
                cfg.ead = true;
                None
            }
            MethodArm::TwoStage { cleaner, .. } => {
                cfg.ead = false;
                Some(*cleaner)
            }
        };
        Ok(row(self, ctx.train_and_score(&cfg, cleaner)?))
    }
}

pub const COMPONENTS: [&str; 5] = ["aux_selection", "spatial_attention", "temporal_attention", "transformer", "recurrent"];
pub const DELTA_GRID: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];
pub const FILLS: [&str; 4] = ["remove", "mean", "lowess", "periodic_mean"];

/// Ordered collection of arms, run in registration order.
#[derive(Default)]
pub struct AblationRegistry {
    arms: Vec<Box<dyn AblationArm>>,
}

impl AblationRegistry {
    pub fn standard() -> Self {
        let mut r = Self::default();
        r.register(Box::new(ComponentArm { component: None }));
        for c in COMPONENTS {
            r.register(Box::new(ComponentArm { component: Some(c) }));
        }
        for delta in DELTA_GRID {
            r.register(Box::new(DeltaArm { delta }));
        }
        for fill in FILLS {
            r.register(Box::new(FillArm { fill }));
        }
        r.register(Box::new(MethodArm::Plain));
        r.register(Box::new(MethodArm::Embedded));
        r.register(Box::new(MethodArm::TwoStage {
            cleaner: "three_sigma",
            label: "3sigma",
        }));
        r.register(Box::new(MethodArm::TwoStage {
            cleaner: "ewma",
            label: "EWMA",
        }));
        r
    }

    pub fn register(&mut self, arm: Box<dyn AblationArm>) {
        self.arms.push(arm);
    }

    /// Keeps only arms whose group is listed; an empty list keeps all.
    pub fn restrict(mut self, groups: &[String]) -> Result<Self> {
        if groups.is_empty() {
            return Ok(self);
        }
        for g in groups {
            if !self.arms.iter().any(|a| a.group() == g) {
                return Err(SttsError::Config(format!("unknown ablation group {g:?}")));
            }
        }
        self.arms.retain(|a| groups.iter().any(|g| g == a.group()));
        Ok(self)
    }

    pub fn names(&self) -> Vec<String> {
        self.arms.iter().map(|a| format!("{}/{}", a.group(), a.name())).collect()
    }

    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    pub fn count(&self, group: &str) -> usize {
        self.arms.iter().filter(|a| a.group() == group).count()
    }

    pub fn run(&self, ctx: &AblationContext<'_>, mut on_arm: impl FnMut(&ArmResult)) -> Result<Vec<ArmResult>> {
        let mut rows = Vec::with_capacity(self.arms.len());
        for arm in &self.arms {
            let r = arm.run(ctx)?;
            on_arm(&r);
            rows.push(r);
        }
        Ok(rows)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> SttsError {
    SttsError::Parse(format!("{}: {e}", path.display()))
}

fn f1_cell(f1: Option<f64>) -> String {
    f1.map_or_else(String::new, |v| v.to_string())
}

/// `group,arm,rmse,mae,detection_f1` for every arm.
pub fn write_ablation(rows: &[ArmResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["group", "arm", "rmse", "mae", "detection_f1"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.arm.clone(),
            r.rmse.to_string(),
            r.mae.to_string(),
            f1_cell(r.detection_f1),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| SttsError::io(path, e))
}

/// `method,rmse,mae,detection_f1` for the method rows only.
pub fn write_comparison(rows: &[ArmResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["method", "rmse", "mae", "detection_f1"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows.iter().filter(|r| r.group == "method") {
        w.write_record([r.arm.clone(), r.rmse.to_string(), r.mae.to_string(), f1_cell(r.detection_f1)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| SttsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_matrix_shape() {
        let r = AblationRegistry::standard();
        assert_eq!(r.count("component"), 6);
        assert_eq!(r.count("delta"), 5);
        assert_eq!(r.count("fill"), 4);
        assert_eq!(r.count("method"), 4);
        let names = r.names();
        assert!(names.contains(&"component/w/o recurrent".to_string()));
        assert!(names.contains(&"method/STTS-3sigma".to_string()));
    }

    #[test]
    fn component_names_are_config_keys() {
        let mut cfg = RunConfig::default();
        for c in COMPONENTS {
            cfg.apply_override(&format!("{c}=false")).unwrap();
        }
        assert!(!cfg.recurrent && !cfg.aux_selection && !cfg.transformer);
    }

    #[test]
    fn restrict_filters_and_rejects_unknown_groups() {
        let r = AblationRegistry::standard().restrict(&["delta".into()]).unwrap();
        assert_eq!(r.len(), 5);
        assert!(AblationRegistry::standard().restrict(&["speed".into()]).is_err());
    }
}
