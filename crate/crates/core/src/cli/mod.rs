//! The `stts` command line: `generate`, `train`, `evaluate`, `detect` and
//! `ablate`. Every command writes its resolved configuration next to its
//! outputs.

pub mod ablation;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::baselines::{detection_quality, MetricReport, Split};
use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, load_panel, make_windows, read_labels, write_graph, write_labels, write_panel, LoadOptions,
    SeriesPanel, SplitSpec,
};
use crate::ead::{detect, evaluate, residual_sweep, run_training_with, write_history, write_reports, ThresholdRegistry};
use crate::error::{Result, SttsError};
use crate::model::{Checkpoint, Stts};

pub use ablation::{AblationArm, AblationContext, AblationRegistry, ArmResult};

#[derive(Debug, Parser)]
#[command(name = "stts", version, about = "Spatio-temporal forecasting with anomaly detection inside training")]
pub struct Cli {
    /// Flat TOML config; omitted keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic panel, graph, labels and a matching config.
    Generate,
    /// Train, writing checkpoint, metric history and anomaly report.
    Train {
        /// Train the plain forecaster without detection rounds.
        #[arg(long)]
        no_ead: bool,
        /// Also write the learned per-series embeddings.
        #[arg(long)]
        embeddings: bool,
    },
    /// Score a checkpoint on one split in original units.
    Evaluate {
        /// Defaults to `<output_dir>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// One residual sweep and detection round with a trained checkpoint.
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the comparison arms and write `ablation.csv` and `comparison.csv`.
    Ablate {
        /// Restrict to these groups: component, delta, fill, method.
        #[arg(long = "group")]
        groups: Vec<String>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Failures print one `error: kind=... msg=...` line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error: kind=usage msg={first}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("output_dir={}", out.display()));
    }
    RunConfig::resolve(cli.config.as_deref(), &overrides)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train { no_ead, embeddings } => cmd_train(&cfg, *no_ead, *embeddings),
        Command::Evaluate { checkpoint, split } => {
            let m = cmd_evaluate(&cfg, checkpoint.as_deref(), (*split).into())?;
            println!("split={} rmse={} mae={} n={}", m.split, m.rmse, m.mae, m.n_samples);
            Ok(())
        }
        Command::Detect { checkpoint } => cmd_detect(&cfg, checkpoint.as_deref()),
        Command::Ablate { groups } => cmd_ablate(&cfg, groups).map(|_| ()),
    }
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| SttsError::io(&dir, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| SttsError::io(&path, e))?;
    Ok(dir)
}

/// Loads the configured panel, normalizes it on the training range and
/// attaches labels when a label file is configured.
pub fn load_data(cfg: &RunConfig) -> Result<(SeriesPanel, SplitSpec)> {
    let graph = if cfg.use_graph { cfg.graph_path.as_deref() } else { None };
    let options = LoadOptions {
        missing: cfg.missing,
        normalize_end: None,
    };
    let mut panel = load_panel(&cfg.panel_path, graph, &options)?;
    let split = cfg.split_for(panel.n_timestamps())?;
    panel.normalize(split.train_end)?;
    if let Some(lp) = &cfg.labels_path {
        let positions = read_labels(lp, panel.series_ids())?;
        let mut labels = vec![vec![false; panel.n_timestamps()]; panel.n_series()];
        for (i, t) in positions {
            if t >= panel.n_timestamps() {
                return Err(SttsError::Invalid(format!("labels: timestamp {t} beyond the panel")));
            }
            labels[i][t] = true;
        }
        panel = panel.with_labels(labels)?;
    }
    Ok((panel, split))
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let panel = generate_synthetic(&cfg.synthetic_spec(), cfg.seed)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| SttsError::io(&dir, e))?;
    let mut resolved = cfg.clone();
    resolved.panel_path = dir.join("panel.csv");
    resolved.graph_path = Some(dir.join("graph.csv"));
    resolved.labels_path = Some(dir.join("labels.csv"));
    write_panel(&panel, &resolved.panel_path)?;
    write_graph(&panel, resolved.graph_path.as_deref().unwrap())?;
    write_labels(&panel, resolved.labels_path.as_deref().unwrap())?;
    prepare_output(&resolved)?;
    eprintln!(
        "generated {} series x {} timestamps, {} labeled points in {}",
        panel.n_series(),
        panel.n_timestamps(),
        panel.labeled_positions().len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, no_ead: bool, embeddings: bool) -> Result<()> {
    let mut cfg = cfg.clone();
    if no_ead {
        cfg.ead = false;
    }
    let (panel, split) = load_data(&cfg)?;
    let dir = prepare_output(&cfg)?;
    let result = run_training_with(&panel, &split, &cfg.model_config(), &cfg.train_config(), |m| {
        eprintln!(
            "epoch {} train_loss {:.5} valid_rmse {:.5} valid_mae {:.5}",
            m.epoch, m.train_loss, m.valid_rmse, m.valid_mae
        )
    })?;
    Checkpoint::from_model(&result.model, panel.graph()).save(&dir.join("checkpoint.json"))?;
    write_history(&result.history, &dir.join("metrics.csv"))?;
    write_reports(&result.reports, &panel, &dir.join("anomalies.csv"))?;
    if embeddings {
        write_embeddings(&result.model, &panel, &dir.join("embeddings.csv"))?;
    }
    let detected = result.detected();
    match panel.anomaly_labels() {
        Some(labels) => {
            let q = detection_quality(&detected, labels);
            eprintln!(
                "flagged {} points: precision {:.3} recall {:.3} f1 {:.3}",
                detected.len(),
                q.precision,
                q.recall,
                q.f1
            );
        }
        None => eprintln!("flagged {} points", detected.len()),
    }
    Ok(())
}

fn write_embeddings(model: &Stts, panel: &SeriesPanel, path: &Path) -> Result<()> {
    let e = model.embeddings();
    let mut out = String::from("series_id");
    for k in 0..e.cols() {
        out.push_str(&format!(",e{k}"));
    }
    out.push('\n');
    for (i, id) in panel.series_ids().iter().enumerate() {
        out.push_str(id);
        for v in e.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| SttsError::io(path, e))
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>, panel: &SeriesPanel) -> Result<Stts> {
    let path = path.map_or_else(|| cfg.output_dir.join("checkpoint.json"), Path::to_path_buf);
    let ckpt = Checkpoint::load(&path)?;
    ckpt.check_compatible(&cfg.model_config(), panel.n_series())?;
    ckpt.to_model()
}

/// Metrics of a stored model on one split of the configured panel.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split) -> Result<MetricReport> {
    let (panel, spec) = load_data(cfg)?;
    let model = load_checkpoint(cfg, checkpoint, &panel)?;
    let windows = make_windows(&panel, &spec, cfg.window)?;
    let samples = match split {
        Split::Train => &windows.train,
        Split::Valid => &windows.valid,
        Split::Test => &windows.test,
    };
    let m = evaluate(&model, &panel, samples, split)?;
    let dir = prepare_output(cfg)?;
    let path = dir.join(format!("evaluation_{split}.csv"));
    let text = format!("split,rmse,mae,n_samples\n{split},{},{},{}\n", m.rmse, m.mae, m.n_samples);
    fs::write(&path, text).map_err(|e| SttsError::io(&path, e))?;
    Ok(m)
}

pub fn cmd_detect(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let (panel, split) = load_data(cfg)?;
    let model = load_checkpoint(cfg, checkpoint, &panel)?;
    let train = make_windows(&panel, &split, cfg.window)?.train;
    let ledger = residual_sweep(&model, &panel, &train)?;
    let mode = ThresholdRegistry::default().build(&cfg.threshold_mode)?;
    let tc = cfg.train_config();
    let report = detect(&ledger, cfg.delta, mode.as_ref(), &tc.threshold, split.train_end, 0)?;
    let dir = prepare_output(cfg)?;
    write_reports(std::slice::from_ref(&report), &panel, &dir.join("detections.csv"))?;
    match panel.anomaly_labels() {
        Some(labels) => {
            let q = detection_quality(&report.positions, labels);
            eprintln!("flagged {} points: f1 {:.3}", report.positions.len(), q.f1);
        }
        None => eprintln!("flagged {} points", report.positions.len()),
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, groups: &[String]) -> Result<Vec<ArmResult>> {
    let registry = AblationRegistry::standard().restrict(groups)?;
    let (panel, split) = load_data(cfg)?;
    let dir = prepare_output(cfg)?;
    let ctx = AblationContext::new(&panel, split, cfg.clone());
    let rows = registry.run(&ctx, |r| {
        eprintln!(
            "{}/{}: rmse {:.5} mae {:.5} f1 {}",
            r.group,
            r.arm,
            r.rmse,
            r.mae,
            r.detection_f1.map_or_else(|| "-".into(), |f| format!("{f:.3}"))
        )
    })?;
    ablation::write_ablation(&rows, &dir.join("ablation.csv"))?;
    ablation::write_comparison(&rows, &dir.join("comparison.csv"))?;
    Ok(rows)
}
