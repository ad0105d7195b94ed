//! Scenario configuration: a TOML file with one table per subsystem.
//!
//! Every key is optional and falls back to the baseline scenario; unknown keys
//! and duplicate keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::model::{NodeParameters, DEFAULT_SOURCE_DG_MAX, DEFAULT_SUPERPEER_DG_MAX, PEER_DG_MAX_HIGH, PEER_DG_MAX_LOW};
use crate::protocol::{ChurnSettings, PeerTimers};
use crate::solver::SolverSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Population {
    pub peers: usize,
    pub superpeers: usize,
    pub sources: usize,
    pub channels: usize,
}

impl Default for Population {
    fn default() -> Self {
        Self {
            peers: 1200,
            superpeers: 16,
            sources: 4,
            channels: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodeSettings {
    /// Connection limit per direction.
    #[serde(rename = "N")]
    pub max_connections: usize,
    pub max_in: Option<usize>,
    pub max_out: Option<usize>,
    /// Superpeer limit in both directions.
    #[serde(rename = "superpeer_N")]
    pub superpeer_max_connections: Option<usize>,
    pub source_max_in: Option<usize>,
    #[serde(rename = "peer_R")]
    pub peer_repeatability: f64,
    #[serde(rename = "superpeer_R")]
    pub superpeer_repeatability: f64,
    pub peer_dgmax_fixed: Option<f64>,
    pub superpeer_dg_max: f64,
    pub source_dg_max: f64,
    /// Whether superpeers run the ranking and eviction loop.
    pub superpeer_maintenance: bool,
}

impl Default for NodeSettings {
    fn default() -> Self {
        Self {
            max_connections: 8,
            max_in: None,
            max_out: None,
            superpeer_max_connections: Some(DEFAULT_SUPERPEER_CONNECTIONS),
            source_max_in: None,
            peer_repeatability: 1.0,
            superpeer_repeatability: DEFAULT_SUPERPEER_REPEATABILITY,
            peer_dgmax_fixed: None,
            superpeer_dg_max: DEFAULT_SUPERPEER_DG_MAX,
            source_dg_max: DEFAULT_SOURCE_DG_MAX,
            superpeer_maintenance: true,
        }
    }
}

/// Default superpeer repeatability. Values at or near 1 cannot sustain a
/// swarm with lossy peers: only sources and amplifying superpeers add
/// goodput to the overlay.
pub const DEFAULT_SUPERPEER_REPEATABILITY: f64 = 12.0;

/// Default superpeer connection limit. With the common-peer limit, peers
/// fill a superpeer's in-slots and it starves.
pub const DEFAULT_SUPERPEER_CONNECTIONS: usize = 64;

impl NodeSettings {
    pub fn node_parameters(&self) -> NodeParameters {
        NodeParameters {
            max_connections: self.max_connections,
            max_in: self.max_in,
            max_out: self.max_out,
            superpeer_max_connections: self.superpeer_max_connections,
            source_max_in: self.source_max_in,
            peer_repeatability: self.peer_repeatability,
            superpeer_repeatability: self.superpeer_repeatability,
            peer_dg_max_fixed: self.peer_dgmax_fixed,
            superpeer_dg_max: self.superpeer_dg_max,
            source_dg_max: self.source_dg_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSettings {
    pub sample_size: usize,
}

impl Default for TrackerSettings {
    fn default() -> Self {
        Self { sample_size: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSettings {
    /// Seconds between goodput evaluation epochs.
    pub period: f64,
    /// Leading share of the run excluded from steady-state summaries.
    pub warmup_fraction: f64,
    /// Number of randomly selected nodes to trace.
    pub trace_count: usize,
    /// Explicitly traced node ids.
    pub trace_ids: Vec<u32>,
    /// Re-check every graph invariant at each epoch.
    pub check_invariants: bool,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self {
            period: 1.0,
            warmup_fraction: 0.2,
            trace_count: 2,
            trace_ids: Vec::new(),
            check_invariants: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub duration: f64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Write `events.log` with one line per processed event.
    pub event_trace: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            duration: 1200.0,
            seed: 1,
            output_dir: None,
            event_trace: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub population: Population,
    pub nodes: NodeSettings,
    pub timers: PeerTimers,
    pub tracker: TrackerSettings,
    pub churn: ChurnSettings,
    pub solver: SolverSettings,
    pub metrics: MetricsSettings,
    pub run: RunSettings,
}

impl ScenarioConfig {
    /// 1200 peers, 16 superpeers, 4 sources, one channel, N = 8.
    pub fn baseline() -> Self {
        Self::default()
    }

    /// The baseline shrunk to 300 peers, 4 superpeers and one source.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.population.peers = 300;
        c.population.superpeers = 4;
        c.population.sources = 1;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Churn bounds, defaulting to +/-10% of the initial peer count.
    pub fn population_bounds(&self) -> (usize, usize) {
        let peers = self.population.peers;
        let min = self.churn.min_population.unwrap_or(peers - peers / 10);
        let max = self.churn.max_population.unwrap_or(peers + peers / 10);
        (min, max)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Validation(msg.to_string()));
        let p = &self.population;
        if p.sources < 1 {
            return fail("population.sources must be at least 1");
        }
        if p.channels < 1 {
            return fail("population.channels must be at least 1");
        }
        if p.sources < p.channels {
            return fail("population.sources must be at least population.channels");
        }
        let n = &self.nodes;
        if n.max_connections < 1 {
            return fail("nodes.N must be at least 1");
        }
        if [n.max_in, n.max_out, n.superpeer_max_connections, n.source_max_in].contains(&Some(0)) {
            return fail("nodes connection limits must be at least 1");
        }
        if !(0.0..=1.0).contains(&n.peer_repeatability) {
            return fail("nodes.peer_R must lie in [0, 1]");
        }
        if !(n.superpeer_repeatability.is_finite() && n.superpeer_repeatability >= 1.0) {
            return fail("nodes.superpeer_R must be finite and at least 1");
        }
        if let Some(fixed) = n.peer_dgmax_fixed {
            if !(PEER_DG_MAX_LOW..=PEER_DG_MAX_HIGH).contains(&fixed) {
                return fail("nodes.peer_dgmax_fixed must lie in [0.5, 1.0]");
            }
        }
        for (value, name) in [(n.superpeer_dg_max, "superpeer_dg_max"), (n.source_dg_max, "source_dg_max")] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::Validation(format!("nodes.{name} must be positive")));
            }
        }
        self.timers.validate().map_err(ConfigError::Validation)?;
        self.churn.validate().map_err(ConfigError::Validation)?;
        let (min, max) = self.population_bounds();
        if min > max {
            return fail("churn.min_population must not exceed churn.max_population");
        }
        if self.tracker.sample_size < 1 {
            return fail("tracker.sample_size must be at least 1");
        }
        self.solver.validate().map_err(ConfigError::Validation)?;
        let m = &self.metrics;
        if !(m.period.is_finite() && m.period > 0.0) {
            return fail("metrics.period must be positive");
        }
        if !(0.0..1.0).contains(&m.warmup_fraction) {
            return fail("metrics.warmup_fraction must lie in [0, 1)");
        }
        if !(self.run.duration.is_finite() && self.run.duration > 0.0) {
            return fail("run.duration must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_baseline() {
        let c = ScenarioConfig::from_toml_str("").unwrap();
        assert_eq!(c, ScenarioConfig::baseline());
        assert_eq!(
            (c.population.peers, c.population.superpeers, c.population.sources, c.population.channels),
            (1200, 16, 4, 1)
        );
        assert_eq!(c.nodes.max_connections, 8);
    }

    #[test]
    fn sections_override_defaults() {
        let c = ScenarioConfig::from_toml_str(
            r#"
            [population]
            peers = 50
            [nodes]
            N = 4
            peer_R = 0.8
            [churn]
            enabled = false
            [run]
            seed = 9
            "#,
        )
        .unwrap();
        assert_eq!(c.population.peers, 50);
        assert_eq!(c.nodes.max_connections, 4);
        assert_eq!(c.nodes.peer_repeatability, 0.8);
        assert!(!c.churn.enabled);
        assert_eq!(c.run.seed, 9);
    }

    #[test]
    fn zero_sources_is_a_validation_error() {
        let err = ScenarioConfig::from_toml_str("[population]\nsources = 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation(m) if m.contains("sources")));
    }

    #[test]
    fn duplicate_key_is_a_parse_error() {
        let err = ScenarioConfig::from_toml_str("[population]\npeers = 5\npeers = 6\n").unwrap_err();
        let ConfigError::Parse(msg) = err else { panic!("expected parse error") };
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ScenarioConfig::from_toml_str("[population]\npeerz = 5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(m) if m.contains("peerz")));
        assert!(ScenarioConfig::from_toml_str("[bogus]\n").is_err());
    }

    #[test]
    fn class_rules_are_validated() {
        assert!(ScenarioConfig::from_toml_str("[nodes]\npeer_R = 1.1\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[nodes]\nsuperpeer_R = 0.5\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[nodes]\npeer_dgmax_fixed = 1.0\n").is_ok());
        assert!(ScenarioConfig::from_toml_str("[nodes]\npeer_dgmax_fixed = 1.5\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[nodes]\nN = 0\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[run]\nduration = 0.0\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[churn]\np_add = 1.5\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[timers]\nsuspension_duration = 0.0\n").is_err());
    }
}
