//! Goodput evaluation over the overlay.
//!
//! Download goodput of a node is the sum of the per-connection upload goodput
//! of the uploaders it is connected to, clipped at `dg_max`. A node with `n`
//! incoming connections offers `R * dg / n` on each of them. Sources are
//! pinned at `dg_max`.
//!
//! The overlay can be cyclic, so the equations are solved as the least fixed
//! point of the update operator: iteration starts from zero download goodput
//! everywhere except the sources and only ever increases, which attributes to
//! every node only goodput that traces back to a source.

use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Reverse;

use serde::Deserialize;
use thiserror::Error;

use crate::model::{NodeClass, NodeId, OverlayGraph};

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_sweeps: 10_000,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err("solver.tolerance must lie in (0, 1)".into());
        }
        if self.max_sweeps == 0 {
            return Err("solver.max_sweeps must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("goodput iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },
    #[error("overlay contains a cycle; the acyclic evaluator cannot be used")]
    CycleDetected,
}

/// Download goodput and per-connection upload goodput of every active node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoodputAssignment {
    dg: Vec<f64>,
    ug_per_conn: Vec<f64>,
    present: Vec<bool>,
    len: usize,
}

impl GoodputAssignment {
    fn with_bound(bound: usize) -> Self {
        Self {
            dg: vec![0.0; bound],
            ug_per_conn: vec![0.0; bound],
            present: vec![false; bound],
            len: 0,
        }
    }

    fn set(&mut self, id: NodeId, dg: f64, ug_per_conn: f64) {
        let i = id.index();
        if !self.present[i] {
            self.len += 1;
        }
        self.present[i] = true;
        self.dg[i] = dg;
        self.ug_per_conn[i] = ug_per_conn;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `(dg, ug_per_conn)` for an evaluated node.
    pub fn get(&self, id: NodeId) -> Option<(f64, f64)> {
        let i = id.index();
        (i < self.present.len() && self.present[i]).then(|| (self.dg[i], self.ug_per_conn[i]))
    }

    /// Download goodput; zero for nodes that were not evaluated.
    pub fn dg(&self, id: NodeId) -> f64 {
        self.get(id).map_or(0.0, |(dg, _)| dg)
    }

    /// Per-connection upload goodput; zero for nodes that were not evaluated.
    pub fn ug_per_conn(&self, id: NodeId) -> f64 {
        self.get(id).map_or(0.0, |(_, ug)| ug)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, f64, f64)> + '_ {
        self.present
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(i, _)| (NodeId(i as u32), self.dg[i], self.ug_per_conn[i]))
    }
}

/// Active nodes of a graph in compact form: uploader lists in CSR layout.
struct Compact {
    ids: Vec<NodeId>,
    is_source: Vec<bool>,
    dg_max: Vec<f64>,
    repeatability: Vec<f64>,
    n_in: Vec<usize>,
    pinned: Vec<Option<f64>>,
    up_start: Vec<usize>,
    uploaders: Vec<usize>,
}

impl Compact {
    fn build(graph: &OverlayGraph, pins: &BTreeMap<NodeId, f64>) -> Self {
        let mut index = vec![usize::MAX; graph.id_bound()];
        let mut c = Compact {
            ids: Vec::new(),
            is_source: Vec::new(),
            dg_max: Vec::new(),
            repeatability: Vec::new(),
            n_in: Vec::new(),
            pinned: Vec::new(),
            up_start: vec![0],
            uploaders: Vec::new(),
        };
        for node in graph.nodes().filter(|n| n.is_active()) {
            index[node.id.index()] = c.ids.len();
            c.ids.push(node.id);
            c.is_source.push(node.class == NodeClass::Source);
            c.dg_max.push(node.dg_max);
            c.repeatability.push(node.repeatability);
            c.pinned.push(pins.get(&node.id).copied());
        }
        let active = |id: NodeId| index.get(id.index()).copied().filter(|&i| i != usize::MAX);
        for &id in &c.ids {
            c.n_in
                .push(graph.incoming(id).iter().filter(|&&d| active(d).is_some()).count());
            c.uploaders
                .extend(graph.outgoing(id).iter().filter_map(|&u| active(u)));
            c.up_start.push(c.uploaders.len());
        }
        c
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn uploaders_of(&self, v: usize) -> &[usize] {
        &self.uploaders[self.up_start[v]..self.up_start[v + 1]]
    }

    fn upload_rate(&self, v: usize, dg: f64) -> f64 {
        match (self.pinned[v], self.n_in[v]) {
            (Some(pin), _) => pin,
            (None, 0) => 0.0,
            (None, n) => self.repeatability[v] * dg / n as f64,
        }
    }

    fn into_assignment(self, bound: usize, dg: &[f64], ug: &[f64]) -> GoodputAssignment {
        let mut out = GoodputAssignment::with_bound(bound);
        for (v, &id) in self.ids.iter().enumerate() {
            out.set(id, dg[v], ug[v]);
        }
        out
    }
}

/// Solves the goodput equations on the current overlay.
pub fn solve(graph: &OverlayGraph, settings: &SolverSettings) -> Result<GoodputAssignment, SolverError> {
    solve_pinned(graph, settings, &BTreeMap::new())
}

/// As [`solve`], with the per-connection upload goodput of selected nodes held
/// fixed. Pinned nodes act as external feeds.
pub fn solve_pinned(
    graph: &OverlayGraph,
    settings: &SolverSettings,
    pins: &BTreeMap<NodeId, f64>,
) -> Result<GoodputAssignment, SolverError> {
    let c = Compact::build(graph, pins);
    let n = c.len();
    let mut dg = vec![0.0; n];
    let mut ug = vec![0.0; n];
    for v in 0..n {
        if c.is_source[v] {
            dg[v] = c.dg_max[v];
        }
        ug[v] = c.upload_rate(v, dg[v]);
    }

    // In-place (Gauss-Seidel) sweeps. Starting below the least fixed point,
    // every update is non-decreasing and stays below it.
    let mut sweeps = 0;
    loop {
        let mut residual: f64 = 0.0;
        for v in 0..n {
            if c.is_source[v] {
                continue;
            }
            let inflow: f64 = c.uploaders_of(v).iter().map(|&u| ug[u]).sum();
            let next = inflow.min(c.dg_max[v]);
            debug_assert!(next >= dg[v], "goodput iteration must be monotone");
            residual = residual.max(next - dg[v]);
            dg[v] = next;
            ug[v] = c.upload_rate(v, next);
        }
        sweeps += 1;
        if residual < settings.tolerance {
            break;
        }
        if sweeps >= settings.max_sweeps {
            return Err(SolverError::NonConvergence { sweeps, residual });
        }
    }
    Ok(c.into_assignment(graph.id_bound(), &dg, &ug))
}

/// Single-pass evaluation in topological order (uploaders before
/// downloaders). Only defined on acyclic overlays.
pub fn solve_acyclic_oracle(graph: &OverlayGraph) -> Result<GoodputAssignment, SolverError> {
    solve_acyclic_oracle_pinned(graph, &BTreeMap::new())
}

pub fn solve_acyclic_oracle_pinned(
    graph: &OverlayGraph,
    pins: &BTreeMap<NodeId, f64>,
) -> Result<GoodputAssignment, SolverError> {
    let c = Compact::build(graph, pins);
    let n = c.len();
    let mut pending: Vec<usize> = (0..n).map(|v| c.uploaders_of(v).len()).collect();
    let mut downloaders: Vec<Vec<usize>> = vec![Vec::new(); n];
    for v in 0..n {
        for &u in c.uploaders_of(v) {
            downloaders[u].push(v);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| pending[v] == 0).map(Reverse).collect();
    let mut dg = vec![0.0; n];
    let mut ug = vec![0.0; n];
    let mut done = 0;
    while let Some(Reverse(v)) = ready.pop() {
        dg[v] = if c.is_source[v] {
            c.dg_max[v]
        } else {
            let inflow: f64 = c.uploaders_of(v).iter().map(|&u| ug[u]).sum();
            inflow.min(c.dg_max[v])
        };
        ug[v] = c.upload_rate(v, dg[v]);
        done += 1;
        for &d in &downloaders[v] {
            pending[d] -= 1;
            if pending[d] == 0 {
                ready.push(Reverse(d));
            }
        }
    }
    if done < n {
        return Err(SolverError::CycleDetected);
    }
    Ok(c.into_assignment(graph.id_bound(), &dg, &ug))
}
