//! Overlay behaviour: tracker queries, uploader ranking and eviction,
//! watchability back-off and churn, driven by the event kernel.

mod maintenance;
mod tracker;

use std::collections::BTreeSet;
use std::io::Write;

use log::trace;
use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

pub use maintenance::{maintenance_round, rank, Mutation};
pub use tracker::{Candidate, Tracker};

use crate::config::{ConfigError, ScenarioConfig};
use crate::engine::{Engine, EngineError, Event, Handler, SimTime};
use crate::metrics::{MetricsLog, Snapshot};
use crate::model::{make_node, ChannelId, ModelError, NodeClass, NodeId, NodeParameters, OverlayGraph};
use crate::solver::{solve, GoodputAssignment, SolverError};

/// A common peer can watch the channel only with download goodput strictly
/// above this value.
pub const WATCHABLE_DG: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeerTimers {
    pub tracker_query_period: f64,
    pub goodput_monitor_period: f64,
    pub suspension_duration: f64,
    /// Time a (re)joining peer gets to connect before its first
    /// watchability check.
    pub join_grace: f64,
}

impl Default for PeerTimers {
    fn default() -> Self {
        Self {
            tracker_query_period: 5.0,
            goodput_monitor_period: 1.0,
            suspension_duration: 30.0,
            join_grace: 10.0,
        }
    }
}

impl PeerTimers {
    pub fn validate(&self) -> Result<(), String> {
        for (v, name) in [
            (self.tracker_query_period, "tracker_query_period"),
            (self.goodput_monitor_period, "goodput_monitor_period"),
            (self.suspension_duration, "suspension_duration"),
            (self.join_grace, "join_grace"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("timers.{name} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChurnSettings {
    pub enabled: bool,
    pub interval: f64,
    /// Probability that a churn tick adds a peer rather than removing one.
    pub p_add: f64,
    pub min_population: Option<usize>,
    pub max_population: Option<usize>,
}

impl Default for ChurnSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 1.0,
            p_add: 0.5,
            min_population: None,
            max_population: None,
        }
    }
}

impl ChurnSettings {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.interval.is_finite() && self.interval > 0.0) {
            return Err("churn.interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_add) {
            return Err("churn.p_add must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JoinSpec {
    Fresh(NodeClass),
    /// A suspended peer coming back with its identity and parameters.
    Rejoin { node: NodeId, generation: u32 },
}

/// Node-bound events carry the node's generation at scheduling time; a node
/// that was suspended or removed since then ignores them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventKind {
    MaintenanceTick { node: NodeId, generation: u32 },
    ChurnTick,
    WatchabilityCheck { node: NodeId, generation: u32 },
    MetricsSnapshot,
    NodeJoin(JoinSpec),
    NodeLeave(NodeId),
    SimulationEnd,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("goodput evaluation failed at t={time}: {source}")]
    Solver { time: f64, source: SolverError },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invariant violated at t={time}: {detail}")]
    Invariant { time: f64, detail: String },
    #[error("event log: {0}")]
    Io(#[from] std::io::Error),
}

/// Vector with O(1) membership removal and uniform picking.
#[derive(Clone, Debug, Default)]
struct IdPool {
    ids: Vec<NodeId>,
    pos: Vec<Option<usize>>,
}

impl IdPool {
    fn insert(&mut self, id: NodeId) {
        if id.index() >= self.pos.len() {
            self.pos.resize(id.index() + 1, None);
        }
        if self.pos[id.index()].is_none() {
            self.pos[id.index()] = Some(self.ids.len());
            self.ids.push(id);
        }
    }

    fn remove(&mut self, id: NodeId) {
        if let Some(p) = self.pos.get_mut(id.index()).and_then(Option::take) {
            self.ids.swap_remove(p);
            if let Some(&moved) = self.ids.get(p) {
                self.pos[moved.index()] = Some(p);
            }
        }
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<NodeId> {
        (!self.ids.is_empty()).then(|| self.ids[rng.random_range(0..self.ids.len())])
    }
}

/// Simulation state other than the kernel.
pub struct World {
    config: ScenarioConfig,
    params: NodeParameters,
    graph: OverlayGraph,
    tracker: Tracker,
    assignment: GoodputAssignment,
    metrics: MetricsLog,
    last_snapshot: Option<Snapshot>,
    generation: Vec<u32>,
    peer_count: usize,
    churnable: IdPool,
    tracked: BTreeSet<NodeId>,
    next_id: u32,
    joined: [usize; 3],
    event_log: Option<Box<dyn Write + Send>>,
}

pub struct Simulation {
    engine: Engine<EventKind>,
    world: World,
}

impl Simulation {
    /// Builds the initial population and schedules its first events.
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut engine = Engine::new(config.run.seed);
        let mut world = World {
            params: config.nodes.node_parameters(),
            tracker: Tracker::new(config.tracker.sample_size),
            config,
            graph: OverlayGraph::new(),
            assignment: GoodputAssignment::default(),
            metrics: MetricsLog::default(),
            last_snapshot: None,
            generation: Vec::new(),
            peer_count: 0,
            churnable: IdPool::default(),
            tracked: BTreeSet::new(),
            next_id: 0,
            joined: [0; 3],
            event_log: None,
        };
        world.bootstrap(&mut engine)?;
        Ok(Simulation { engine, world })
    }

    /// Sends a `time kind node detail` line per processed event to `sink`.
    pub fn set_event_log(&mut self, sink: Box<dyn Write + Send>) {
        self.world.event_log = Some(sink);
    }

    pub fn run_until(&mut self, end: SimTime) -> Result<u64, SimError> {
        let n = self.engine.run_until(end, &mut self.world)?;
        if let Some(log) = self.world.event_log.as_mut() {
            log.flush()?;
        }
        Ok(n)
    }

    /// Runs to the configured duration.
    pub fn run(&mut self) -> Result<u64, SimError> {
        self.run_until(SimTime::new(self.world.config.run.duration))
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.world.config
    }

    pub fn graph(&self) -> &OverlayGraph {
        &self.world.graph
    }

    pub fn tracker(&self) -> &Tracker {
        &self.world.tracker
    }

    pub fn assignment(&self) -> &GoodputAssignment {
        &self.world.assignment
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.world.metrics
    }

    pub fn last_snapshot(&self) -> Option<&Snapshot> {
        self.world.last_snapshot.as_ref()
    }

    /// Common peers in the overlay, suspended ones included.
    pub fn peer_population(&self) -> usize {
        self.world.peer_count
    }
}

impl World {
    fn bootstrap(&mut self, engine: &mut Engine<EventKind>) -> Result<(), SimError> {
        let pop = self.config.population.clone();
        for (class, count) in [
            (NodeClass::Source, pop.sources),
            (NodeClass::Superpeer, pop.superpeers),
            (NodeClass::Peer, pop.peers),
        ] {
            for _ in 0..count {
                self.spawn(engine, class)?;
            }
        }
        self.select_traces(engine)?;

        let query = self.config.timers.tracker_query_period;
        let ids: Vec<NodeId> = self.graph.nodes().map(|n| n.id).collect();
        for id in ids {
            let phase = engine.rng().random::<f64>() * query;
            self.schedule_node_events(engine, id, SimTime::new(phase))?;
        }
        engine.schedule(SimTime::new(self.config.metrics.period), EventKind::MetricsSnapshot)?;
        if self.config.churn.enabled {
            engine.schedule(SimTime::new(self.config.churn.interval), EventKind::ChurnTick)?;
        }
        engine.schedule(SimTime::new(self.config.run.duration), EventKind::SimulationEnd)?;
        Ok(())
    }

    fn select_traces(&mut self, engine: &mut Engine<EventKind>) -> Result<(), SimError> {
        let mut chosen = BTreeSet::new();
        for &raw in &self.config.metrics.trace_ids {
            let id = NodeId(raw);
            if !self.graph.contains(id) {
                return Err(ConfigError::Validation(format!("metrics.trace_ids: node {id} does not exist")).into());
            }
            chosen.insert(id);
        }
        let mut pools: [Vec<NodeId>; 2] = [NodeClass::Peer, NodeClass::Superpeer].map(|class| {
            self.graph
                .nodes()
                .filter(|n| n.class == class && !chosen.contains(&n.id))
                .map(|n| n.id)
                .collect()
        });
        // Alternate peer, superpeer, peer, ... falling back to whichever class
        // still has nodes left.
        for k in 0..self.config.metrics.trace_count {
            let preferred = k % 2;
            let pool = if pools[preferred].is_empty() { 1 - preferred } else { preferred };
            if pools[pool].is_empty() {
                break;
            }
            let i = engine.rng().random_range(0..pools[pool].len());
            chosen.insert(pools[pool].remove(i));
        }
        for &id in &chosen {
            self.churnable.remove(id);
        }
        self.metrics = MetricsLog::new(&chosen.iter().copied().collect::<Vec<_>>());
        self.tracked = chosen;
        Ok(())
    }

    fn spawn(&mut self, engine: &mut Engine<EventKind>, class: NodeClass) -> Result<NodeId, SimError> {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        let slot = class as usize;
        let channel = ChannelId((self.joined[slot] % self.config.population.channels) as u32);
        self.joined[slot] += 1;
        let node = make_node(class, id, channel, engine.rng(), &self.params)?;
        self.graph.insert_node(node)?;
        self.tracker.register(id, channel);
        if id.index() >= self.generation.len() {
            self.generation.resize(id.index() + 1, 0);
        }
        if class == NodeClass::Peer {
            self.peer_count += 1;
            self.churnable.insert(id);
        }
        Ok(id)
    }

    /// Maintenance from `start` on; for common peers the first watchability
    /// check follows at least one monitor period after the first maintenance.
    fn schedule_node_events(
        &mut self,
        engine: &mut Engine<EventKind>,
        id: NodeId,
        start: SimTime,
    ) -> Result<(), SimError> {
        let class = self.graph.node(id).map(|n| n.class);
        let generation = self.generation[id.index()];
        let maintains = match class {
            Some(NodeClass::Peer) => true,
            Some(NodeClass::Superpeer) => self.config.nodes.superpeer_maintenance,
            _ => false,
        };
        if maintains {
            engine.schedule(start, EventKind::MaintenanceTick { node: id, generation })?;
        }
        if class == Some(NodeClass::Peer) {
            let t = &self.config.timers;
            let phase = t.goodput_monitor_period * engine.rng().random::<f64>();
            let first = start.after(t.join_grace + phase);
            engine.schedule(first, EventKind::WatchabilityCheck { node: id, generation })?;
        }
        Ok(())
    }

    fn is_current(&self, id: NodeId, generation: u32) -> bool {
        self.generation.get(id.index()) == Some(&generation)
            && self.graph.node(id).is_some_and(|n| n.is_active())
    }

    fn log(&mut self, now: SimTime, kind: &str, node: Option<NodeId>, detail: &str) -> Result<(), SimError> {
        if let Some(out) = self.event_log.as_mut() {
            match node {
                Some(id) => writeln!(out, "{now} {kind} {id} {detail}")?,
                None => writeln!(out, "{now} {kind} - {detail}")?,
            }
        }
        Ok(())
    }

    fn on_maintenance(&mut self, engine: &mut Engine<EventKind>, id: NodeId, generation: u32) -> Result<(), SimError> {
        if !self.is_current(id, generation) {
            return self.log(engine.now(), "maintenance", Some(id), "stale");
        }
        let channel = self.graph.node(id).map(|n| n.channel).expect("current node");
        let candidates = self.tracker.sample_advertised(channel, id, engine.rng(), &self.assignment);
        let mutations = maintenance_round(&mut self.graph, &self.assignment, id, candidates);
        let added = mutations.iter().filter(|m| matches!(m, Mutation::Connect { .. })).count();
        let detail = format!("connect={} disconnect={}", added, mutations.len() - added);
        self.log(engine.now(), "maintenance", Some(id), &detail)?;
        let period = self.config.timers.tracker_query_period;
        engine.schedule_in(period, EventKind::MaintenanceTick { node: id, generation })?;
        Ok(())
    }

    fn on_watchability(&mut self, engine: &mut Engine<EventKind>, id: NodeId, generation: u32) -> Result<(), SimError> {
        if !self.is_current(id, generation) {
            return self.log(engine.now(), "watchability", Some(id), "stale");
        }
        let dg = self.assignment.dg(id);
        if dg > WATCHABLE_DG {
            self.log(engine.now(), "watchability", Some(id), &format!("ok dg={dg}"))?;
            let period = self.config.timers.goodput_monitor_period;
            engine.schedule_in(period, EventKind::WatchabilityCheck { node: id, generation })?;
            return Ok(());
        }
        let until = engine.now().after(self.config.timers.suspension_duration);
        self.graph.drop_edges(id)?;
        self.graph.set_suspended(id, Some(until))?;
        self.tracker.unregister(id);
        self.generation[id.index()] += 1;
        let generation = self.generation[id.index()];
        self.log(engine.now(), "watchability", Some(id), &format!("suspend dg={dg} until={until}"))?;
        engine.schedule(until, EventKind::NodeJoin(JoinSpec::Rejoin { node: id, generation }))?;
        Ok(())
    }

    fn on_join(&mut self, engine: &mut Engine<EventKind>, spec: JoinSpec) -> Result<(), SimError> {
        let now = engine.now();
        match spec {
            JoinSpec::Fresh(class) => {
                let id = self.spawn(engine, class)?;
                self.log(now, "join", Some(id), class.as_str())?;
                self.schedule_node_events(engine, id, now)
            }
            JoinSpec::Rejoin { node, generation } => {
                let suspended = self.graph.node(node).is_some_and(|n| n.is_suspended());
                if !suspended || self.generation[node.index()] != generation {
                    return self.log(now, "join", Some(node), "stale");
                }
                self.graph.set_suspended(node, None)?;
                let channel = self.graph.node(node).map(|n| n.channel).expect("exists");
                self.tracker.register(node, channel);
                self.generation[node.index()] += 1;
                self.log(now, "join", Some(node), "rejoin")?;
                self.schedule_node_events(engine, node, now)
            }
        }
    }

    fn on_leave(&mut self, now: SimTime, id: NodeId) -> Result<(), SimError> {
        if !self.graph.contains(id) {
            return self.log(now, "leave", Some(id), "stale");
        }
        let record = self.graph.remove_node(id)?;
        assert_eq!(record.class, NodeClass::Peer, "churn only removes common peers");
        self.tracker.unregister(id);
        self.churnable.remove(id);
        self.peer_count -= 1;
        self.generation[id.index()] += 1;
        self.log(now, "leave", Some(id), "")
    }

    fn on_churn(&mut self, engine: &mut Engine<EventKind>) -> Result<(), SimError> {
        let now = engine.now();
        let (min, max) = self.config.population_bounds();
        let u: f64 = engine.rng().random();
        let detail = if u < self.config.churn.p_add {
            if self.peer_count < max {
                engine.schedule(now, EventKind::NodeJoin(JoinSpec::Fresh(NodeClass::Peer)))?;
                "add"
            } else {
                "add-capped"
            }
        } else if self.peer_count > min {
            match self.churnable.pick(engine.rng()) {
                Some(victim) => {
                    engine.schedule(now, EventKind::NodeLeave(victim))?;
                    "remove"
                }
                None => "remove-none",
            }
        } else {
            "remove-capped"
        };
        self.log(now, "churn", None, detail)?;
        engine.schedule_in(self.config.churn.interval, EventKind::ChurnTick)?;
        Ok(())
    }

    fn on_metrics(&mut self, engine: &mut Engine<EventKind>) -> Result<(), SimError> {
        let now = engine.now();
        self.assignment = solve(&self.graph, &self.config.solver).map_err(|source| SimError::Solver {
            time: now.seconds(),
            source,
        })?;
        if self.config.metrics.check_invariants {
            self.check_invariants(now)?;
        }
        let snapshot = Snapshot::capture(now, &self.graph, &self.assignment);
        self.metrics.record(&snapshot);
        let a = snapshot.aggregates;
        trace!("t={now} mean_dg_peers={} alive={}", a.mean_dg_peers, a.alive_peers);
        self.last_snapshot = Some(snapshot);
        self.log(
            now,
            "metrics",
            None,
            &format!("mean_dg_peers={} mean_ug_peers={}", a.mean_dg_peers, a.mean_ug_peers),
        )?;
        engine.schedule_in(self.config.metrics.period, EventKind::MetricsSnapshot)?;
        Ok(())
    }

    /// Graph invariants plus the per-node goodput bounds and upload identity.
    fn check_invariants(&self, now: SimTime) -> Result<(), SimError> {
        let fail = |detail: String| {
            Err(SimError::Invariant {
                time: now.seconds(),
                detail,
            })
        };
        if let Err(e) = self.graph.check_invariants() {
            return fail(e.to_string());
        }
        for node in self.graph.nodes() {
            if node.is_suspended() && self.tracker.is_registered(node.id) {
                return fail(format!("suspended node {} is registered", node.id));
            }
            let Some((dg, ug)) = self.assignment.get(node.id) else {
                if node.is_active() {
                    return fail(format!("active node {} has no goodput", node.id));
                }
                continue;
            };
            if !(0.0..=node.dg_max).contains(&dg) || ug < 0.0 {
                return fail(format!("node {} goodput out of bounds: dg={dg} ug={ug}", node.id));
            }
            let n = self.graph.incoming(node.id).len();
            let expected = if n == 0 { 0.0 } else { node.repeatability * dg };
            if (ug * n as f64 - expected).abs() > 1e-12 {
                return fail(format!("node {} violates ug * n = R * dg", node.id));
            }
        }
        Ok(())
    }
}

impl Handler<EventKind> for World {
    type Error = SimError;

    fn handle(&mut self, engine: &mut Engine<EventKind>, event: Event<EventKind>) -> Result<(), SimError> {
        match event.kind {
            EventKind::MaintenanceTick { node, generation } => self.on_maintenance(engine, node, generation),
            EventKind::WatchabilityCheck { node, generation } => self.on_watchability(engine, node, generation),
            EventKind::ChurnTick => self.on_churn(engine),
            EventKind::MetricsSnapshot => self.on_metrics(engine),
            EventKind::NodeJoin(spec) => self.on_join(engine, spec),
            EventKind::NodeLeave(id) => self.on_leave(engine.now(), id),
            EventKind::SimulationEnd => self.log(engine.now(), "end", None, ""),
        }
    }
}
