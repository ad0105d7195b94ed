//! Scenario execution and parameter sweeps with CSV output.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::metrics::{aggregate_over_window, write_csv, MetricsError, SummaryRow};
use crate::protocol::{SimError, Simulation};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error("unknown sweep parameter `{0}` (expected peer_R, N, sources or superpeers)")]
    UnknownParameter(String),
    #[error("invalid sweep value {value} for {param}")]
    InvalidValue { param: SweepParam, value: f64 },
    #[error("sweep needs at least one value and one replication")]
    EmptySweep,
}

impl ExperimentError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::Config(ConfigError::Parse(_)) => "parse",
            ExperimentError::Config(ConfigError::Io { .. }) => "io",
            ExperimentError::Config(ConfigError::Validation(_)) => "validation",
            ExperimentError::Simulation(SimError::Solver { .. }) => "non_convergence",
            ExperimentError::Simulation(_) => "simulation",
            ExperimentError::Metrics(_) => "metrics",
            ExperimentError::Output { .. } => "io",
            ExperimentError::UnknownParameter(_)
            | ExperimentError::InvalidValue { .. }
            | ExperimentError::EmptySweep => "usage",
        }
    }
}

/// Outcome of one scenario.
pub struct ScenarioRun {
    pub simulation: Simulation,
    /// Steady-window summary; `None` when the window holds no epoch.
    pub summary: Option<SummaryRow>,
}

/// Start and end of the steady-state window.
pub fn steady_window(config: &ScenarioConfig) -> (f64, f64) {
    let duration = config.run.duration;
    (config.metrics.warmup_fraction * duration, duration)
}

/// Bootstraps and runs a scenario to its configured duration. Writes
/// outputs when `config.run.output_dir` is set.
pub fn run_scenario(config: ScenarioConfig) -> Result<ScenarioRun, ExperimentError> {
    let mut simulation = Simulation::new(config)?;
    let out_dir = simulation.config().run.output_dir.clone();
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(|source| output_error(dir, source))?;
        if simulation.config().run.event_trace {
            let path = dir.join("events.log");
            let file = File::create(&path).map_err(|source| output_error(&path, source))?;
            simulation.set_event_log(Box::new(BufWriter::new(file)));
        }
    }
    simulation.run()?;
    let (from, to) = steady_window(simulation.config());
    let summary = match aggregate_over_window(simulation.metrics().rows(), from, to) {
        Ok(s) => Some(s),
        Err(MetricsError::EmptyWindow { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    if let Some(dir) = &out_dir {
        write_outputs(&simulation, dir)?;
    }
    Ok(ScenarioRun { simulation, summary })
}

fn output_error(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Output {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_error(path: &Path, e: csv::Error) -> ExperimentError {
    output_error(path, std::io::Error::other(e))
}

/// Writes `snapshots.csv` and one `trace_<id>.csv` per traced node.
pub fn write_outputs(simulation: &Simulation, dir: &Path) -> Result<(), ExperimentError> {
    let metrics = simulation.metrics();
    let path = dir.join("snapshots.csv");
    let file = File::create(&path).map_err(|e| output_error(&path, e))?;
    metrics
        .write_snapshots_csv(BufWriter::new(file))
        .map_err(|e| csv_error(&path, e))?;
    for id in metrics.tracked() {
        let path = dir.join(format!("trace_{id}.csv"));
        let file = File::create(&path).map_err(|e| output_error(&path, e))?;
        metrics
            .write_trace_csv(id, BufWriter::new(file))?
            .map_err(|e| csv_error(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    PeerRepeatability,
    MaxConnections,
    Sources,
    Superpeers,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::PeerRepeatability => "peer_R",
            SweepParam::MaxConnections => "N",
            SweepParam::Sources => "sources",
            SweepParam::Superpeers => "superpeers",
        }
    }

    /// Returns a copy of `base` with the parameter set to `value`.
    pub fn apply(self, base: &ScenarioConfig, value: f64) -> Result<ScenarioConfig, ExperimentError> {
        let mut c = base.clone();
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(ExperimentError::InvalidValue { param: self, value })
            }
        };
        match self {
            SweepParam::PeerRepeatability => c.nodes.peer_repeatability = value,
            SweepParam::MaxConnections => c.nodes.max_connections = count()?,
            SweepParam::Sources => c.population.sources = count()?,
            SweepParam::Superpeers => c.population.superpeers = count()?,
        }
        Ok(c)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "peer_R" => Ok(SweepParam::PeerRepeatability),
            "N" => Ok(SweepParam::MaxConnections),
            "sources" => Ok(SweepParam::Sources),
            "superpeers" => Ok(SweepParam::Superpeers),
            other => Err(ExperimentError::UnknownParameter(other.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub replications: usize,
    pub base: ScenarioConfig,
}

/// Seed of one sweep scenario: SplitMix64 finalizer applied to the base seed
/// folded with the point and replication indices.
pub fn derive_seed(base: u64, point: usize, replication: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(base) ^ point as u64) ^ replication as u64)
}

/// Result of one (value, replication) scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub point: usize,
    pub replication: usize,
    pub seed: u64,
    pub outcome: Result<SummaryRow, String>,
}

impl SweepRow {
    pub fn mean_dg(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|s| s.mean_dg)
    }

    pub fn mean_ug(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|s| s.mean_ug)
    }
}

#[derive(Serialize)]
struct SweepCsvRow<'a> {
    param_name: &'a str,
    param_value: f64,
    replication: usize,
    seed: u64,
    mean_dg: String,
    mean_ug: String,
}

/// Runs every (value, replication) pair, in parallel. Rows come back in
/// (point, replication) order; a failed scenario yields a row carrying the
/// error instead of aborting the sweep.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, ExperimentError> {
    if spec.values.is_empty() || spec.replications == 0 {
        return Err(ExperimentError::EmptySweep);
    }
    let mut jobs = Vec::new();
    for (point, &value) in spec.values.iter().enumerate() {
        let mut config = spec.param.apply(&spec.base, value)?;
        config.run.output_dir = None;
        for replication in 0..spec.replications {
            let mut c = config.clone();
            c.run.seed = derive_seed(spec.base.run.seed, point, replication);
            jobs.push((point, value, replication, c));
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(point, value, replication, config)| {
            let seed = config.run.seed;
            let outcome = run_scenario(config)
                .map_err(|e| e.to_string())
                .and_then(|run| run.summary.ok_or_else(|| "empty steady window".to_string()));
            if let Err(e) = &outcome {
                log::warn!("{}={value} replication {replication} failed: {e}", spec.param);
            }
            SweepRow {
                param: spec.param,
                value,
                point,
                replication,
                seed,
                outcome,
            }
        })
        .collect())
}

/// Writes `sweep.csv`. Failed scenarios carry `error` in both mean columns.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), ExperimentError> {
    let csv_rows: Vec<SweepCsvRow> = rows
        .iter()
        .map(|r| SweepCsvRow {
            param_name: r.param.name(),
            param_value: r.value,
            replication: r.replication,
            seed: r.seed,
            mean_dg: r.mean_dg().map_or_else(|| "error".into(), |v| v.to_string()),
            mean_ug: r.mean_ug().map_or_else(|| "error".into(), |v| v.to_string()),
        })
        .collect();
    let file = File::create(path).map_err(|e| output_error(path, e))?;
    write_csv(
        BufWriter::new(file),
        &csv_rows,
        &["param_name", "param_value", "replication", "seed", "mean_dg", "mean_ug"],
    )
    .map_err(|e| csv_error(path, e))
}
