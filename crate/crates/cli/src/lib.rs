//! Experiment commands behind the `fedexdnn` binary.
//!
//! Every run writes into its own directory:
//!
//! * `round_NNN.json` — the resolved config and one [`RoundReport`]
//! * `summary.csv` — one row per round
//! * `manifest.json` — resolved config, its hash, output path and timestamps
//! * `model.json` — the final global model and normalisation statistics
//!
//! Sweeps write one such directory per variant plus a top-level
//! `summary.csv` with a leading `run` column.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use fedexdnn::data::NormStats;
use fedexdnn::fedserver::Aggregator;
use fedexdnn::model::GlobalModel;
use fedexdnn::orchestrator::{
    run_experiment, run_local, DataSource, ExperimentConfig, ExperimentOutcome, RoundReport, RunError, RunOptions,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Run(#[from] RunError),
}

impl CliError {
    /// 2 for configuration problems, 3 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(e) if e.is_config() => 2,
            CliError::Io { .. } | CliError::Run(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads and validates a JSON config. Relative CSV paths are resolved
/// against the config file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let DataSource::Csv { train, test, val, .. } = &mut cfg.data.source {
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [Some(&mut *train), Some(&mut *test), val.as_mut()].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for (field, p) in [("data.source.train", &*train), ("data.source.test", &*test)] {
            if !p.exists() {
                return Err(CliError::Config(format!("{field}: file {} not found", p.display())));
            }
        }
        if let Some(p) = val.as_ref().filter(|p| !p.exists()) {
            return Err(CliError::Config(format!("data.source.val: file {} not found", p.display())));
        }
    }
    Ok(cfg)
}

/// Loss term that an ablation switches off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Cluster,
    Balance,
    Absolute,
    Drp,
}

impl Toggle {
    pub const ALL: [Toggle; 4] = [Toggle::Cluster, Toggle::Balance, Toggle::Absolute, Toggle::Drp];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::Cluster => "cluster",
            Toggle::Balance => "balance",
            Toggle::Absolute => "absolute",
            Toggle::Drp => "drp",
        }
    }

    /// Zero-weights this term.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let w = match self {
            Toggle::Cluster => &mut cfg.loss.cluster_weight,
            Toggle::Balance => &mut cfg.loss.balance_weight,
            Toggle::Absolute => &mut cfg.loss.absolute_weight,
            Toggle::Drp => &mut cfg.loss.drp_weight,
        };
        *w = 0.0;
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toggle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Toggle::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Toggle::ALL.iter().map(|t| t.name()).collect();
            format!("unknown toggle '{s}'; expected one of: {}", names.join(", "))
        })
    }
}

/// One finished run and where it was written.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub name: String,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub reports: Vec<RoundReport>,
}

impl RunRecord {
    pub fn final_report(&self) -> &RoundReport {
        self.reports.last().expect("every run reports at least once")
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a ExperimentConfig,
    report: &'a RoundReport,
}

#[derive(Serialize)]
struct ModelFile<'a> {
    model: &'a GlobalModel,
    norm: &'a NormStats,
}

/// Provenance for one run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub config: &'a ExperimentConfig,
    pub config_hash: String,
    pub output_dir: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: &'static str,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report types serialise");
    fs::write(path, text + "\n").map_err(io_err(path))
}

const SUMMARY_HEADER: [&str; 8] = ["round", "aggregator", "auc", "f1", "precision", "recall", "threshold", "seconds"];

fn summary_row(r: &RoundReport) -> Vec<String> {
    let t = r.metrics.at_threshold;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    vec![
        r.round.to_string(),
        r.aggregator.map_or("local".to_string(), |a| a.to_string()),
        r.metrics.auc.to_string(),
        opt(t.map(|t| t.f1)),
        opt(t.map(|t| t.precision)),
        opt(t.map(|t| t.recall)),
        opt(t.map(|t| t.threshold)),
        format!("{:.3}", r.seconds),
    ]
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        source: e.into(),
    }
}

/// Writes one run directory.
pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
    started_unix: u64,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for r in &outcome.reports {
        write_json(
            &dir.join(format!("round_{:03}.json", r.round)),
            &ReportFile { config: cfg, report: r },
        )?;
    }
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err(&path))?;
    for r in &outcome.reports {
        w.write_record(summary_row(r)).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    write_json(
        &dir.join("model.json"),
        &ModelFile {
            model: &outcome.model,
            norm: &outcome.norm,
        },
    )?;
    write_json(
        &dir.join("manifest.json"),
        &RunManifest {
            config: cfg,
            config_hash: cfg.hash(),
            output_dir: dir.display().to_string(),
            started_unix,
            finished_unix: unix_now(),
            version: env!("CARGO_PKG_VERSION"),
        },
    )
}

fn write_sweep_summary(out: &Path, runs: &[RunRecord]) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(std::iter::once("run").chain(SUMMARY_HEADER))
        .map_err(csv_err(&path))?;
    for run in runs {
        for r in &run.reports {
            w.write_record(std::iter::once(run.name.clone()).chain(summary_row(r)))
                .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))
}

/// Variant name → config. A single unnamed variant writes straight into
/// `out`; several get a sub-directory each and a combined summary.
fn run_variants(
    out: &Path,
    variants: Vec<(String, ExperimentConfig)>,
    run: impl Fn(&ExperimentConfig) -> Result<ExperimentOutcome, RunError>,
) -> Result<Vec<RunRecord>, CliError> {
    let sweep = variants.len() > 1;
    let mut records = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        cfg.validate()?;
        let dir = if sweep { out.join(&name) } else { out.to_path_buf() };
        log::info!("run '{name}' → {}", dir.display());
        let started = unix_now();
        let outcome = run(&cfg)?;
        write_run(&dir, &cfg, &outcome, started)?;
        records.push(RunRecord {
            name,
            dir,
            config: cfg,
            reports: outcome.reports,
        });
    }
    if sweep {
        write_sweep_summary(out, &records)?;
    }
    Ok(records)
}

fn exemplar_variants(base: Vec<(String, ExperimentConfig)>, exemplars: &[usize]) -> Vec<(String, ExperimentConfig)> {
    if exemplars.is_empty() {
        return base;
    }
    base.into_iter()
        .flat_map(|(name, cfg)| {
            exemplars.iter().map(move |&k| {
                let mut c = cfg.clone();
                c.exemplars = k;
                (join_name(&name, &format!("k{k}")), c)
            })
        })
        .collect()
}

fn join_name(a: &str, b: &str) -> String {
    if a.is_empty() {
        b.to_string()
    } else {
        format!("{a}_{b}")
    }
}

fn finish_names(mut v: Vec<(String, ExperimentConfig)>, default: &str) -> Vec<(String, ExperimentConfig)> {
    for (name, _) in &mut v {
        if name.is_empty() {
            *name = default.to_string();
        }
    }
    v
}

/// Single-device ExDNN, optionally swept over exemplar counts.
pub fn cmd_local(cfg: &ExperimentConfig, exemplars: &[usize], out: &Path) -> Result<Vec<RunRecord>, CliError> {
    let variants = finish_names(exemplar_variants(vec![(String::new(), cfg.clone())], exemplars), "local");
    run_variants(out, variants, run_local)
}

/// Federated runs, optionally swept over aggregators and exemplar counts.
pub fn cmd_fed(
    cfg: &ExperimentConfig,
    aggregators: &[Aggregator],
    exemplars: &[usize],
    opts: RunOptions,
    out: &Path,
) -> Result<Vec<RunRecord>, CliError> {
    let base = if aggregators.is_empty() {
        vec![(String::new(), cfg.clone())]
    } else {
        aggregators
            .iter()
            .map(|&a| {
                let mut c = cfg.clone();
                c.aggregator = a;
                (a.to_string(), c)
            })
            .collect()
    };
    let variants = finish_names(exemplar_variants(base, exemplars), &cfg.aggregator.to_string());
    run_variants(out, variants, |c| run_experiment(c, opts))
}

/// Single-device ablations: the full model plus one run per toggled-off
/// loss term, crossed with any contamination levels and balance weights.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    toggles: &[Toggle],
    contaminate: &[f64],
    balance_weights: &[f64],
    out: &Path,
) -> Result<Vec<RunRecord>, CliError> {
    let mut variants = vec![("full".to_string(), cfg.clone())];
    for &t in toggles {
        let mut c = cfg.clone();
        t.apply(&mut c);
        variants.push((format!("wo_{t}"), c));
    }
    if !contaminate.is_empty() {
        variants = variants
            .into_iter()
            .flat_map(|(name, c)| contaminate.iter().map(move |&f| (name.clone(), c.clone(), f)))
            .map(|(name, mut c, f)| {
                match &mut c.data.source {
                    DataSource::Synthetic {
                        train_anomaly_fraction, ..
                    } => *train_anomaly_fraction = f,
                    DataSource::Csv { .. } => {
                        return Err(CliError::Config("--contaminate needs a synthetic data source".into()))
                    }
                }
                Ok((format!("{name}_c{f}"), c))
            })
            .collect::<Result<_, _>>()?;
    }
    if !balance_weights.is_empty() {
        variants = variants
            .into_iter()
            .flat_map(|(name, c)| {
                balance_weights.iter().map(move |&w| {
                    let mut c = c.clone();
                    c.loss.balance_weight = w;
                    (format!("{name}_bal{w}"), c)
                })
            })
            .collect();
    }
    if variants.len() == 1 {
        // keep the sweep layout so ablation output is always per-variant
        let (name, c) = variants.pop().expect("one variant");
        let dir = out.join(&name);
        let started = unix_now();
        let outcome = run_local(&c)?;
        write_run(&dir, &c, &outcome, started)?;
        return Ok(vec![RunRecord {
            name,
            dir,
            config: c,
            reports: outcome.reports,
        }]);
    }
    run_variants(out, variants, run_local)
}
