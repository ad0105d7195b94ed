//! Discrete-event simulator of a BitTorrent-style peer-to-peer live TV
//! overlay.
//!
//! Sources inject a channel, superpeers relay it with amplified upload
//! capacity, and common peers self-organize by ranking uploaders advertised
//! by a tracker. Goodput is evaluated over the whole overlay at fixed epochs;
//! peers whose download goodput is too low to watch back off for a while.

pub mod config;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod solver;

pub use config::{ConfigError, ScenarioConfig};
pub use engine::SimTime;
pub use experiment::{run_scenario, run_sweep, ExperimentError, SweepParam, SweepRow, SweepSpec};
pub use model::{NodeClass, NodeId, OverlayGraph};
pub use protocol::{SimError, Simulation};
pub use solver::{solve, GoodputAssignment, SolverSettings};
