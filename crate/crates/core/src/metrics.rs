//! Goodput snapshots at the three reporting granularities: system-wide
//! aggregates, per-node samples, and time series of traced nodes.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::engine::SimTime;
use crate::model::{NodeClass, NodeId, OverlayGraph};
use crate::solver::GoodputAssignment;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no snapshots between {from} and {to}")]
    EmptyWindow { from: f64, to: f64 },
    #[error("window start {from} is not before its end {to}")]
    InvalidWindow { from: f64, to: f64 },
    #[error("node {0} is not traced")]
    UnknownNode(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeSample {
    pub id: NodeId,
    pub class: NodeClass,
    pub dg: f64,
    pub ug_per_conn: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub suspended: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregates {
    pub mean_dg_peers: f64,
    pub mean_ug_peers: f64,
    pub mean_dg_all: f64,
    pub mean_ug_all: f64,
    /// Non-suspended common peers.
    pub alive_peers: usize,
    pub suspended: usize,
    pub mean_dg_superpeers: f64,
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Aggregates {
    /// Means over non-suspended nodes.
    pub fn from_samples(samples: &[NodeSample]) -> Self {
        let (mut dg_p, mut ug_p, mut n_p) = (0.0, 0.0, 0usize);
        let (mut dg_a, mut ug_a, mut n_a) = (0.0, 0.0, 0usize);
        let (mut dg_s, mut n_s) = (0.0, 0usize);
        let mut suspended = 0;
        for s in samples {
            if s.suspended {
                suspended += 1;
                continue;
            }
            dg_a += s.dg;
            ug_a += s.ug_per_conn;
            n_a += 1;
            match s.class {
                NodeClass::Peer => {
                    dg_p += s.dg;
                    ug_p += s.ug_per_conn;
                    n_p += 1;
                }
                NodeClass::Superpeer => {
                    dg_s += s.dg;
                    n_s += 1;
                }
                NodeClass::Source => {}
            }
        }
        Aggregates {
            mean_dg_peers: mean(dg_p, n_p),
            mean_ug_peers: mean(ug_p, n_p),
            mean_dg_all: mean(dg_a, n_a),
            mean_ug_all: mean(ug_a, n_a),
            alive_peers: n_p,
            suspended,
            mean_dg_superpeers: mean(dg_s, n_s),
        }
    }
}

/// Full state of one evaluation epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: SimTime,
    pub per_node: Vec<NodeSample>,
    pub aggregates: Aggregates,
}

impl Snapshot {
    pub fn capture(time: SimTime, graph: &OverlayGraph, assignment: &GoodputAssignment) -> Self {
        let per_node: Vec<NodeSample> = graph
            .nodes()
            .map(|n| {
                let (dg, ug_per_conn) = assignment.get(n.id).unwrap_or((0.0, 0.0));
                NodeSample {
                    id: n.id,
                    class: n.class,
                    dg,
                    ug_per_conn,
                    n_in: graph.incoming(n.id).len(),
                    n_out: graph.outgoing(n.id).len(),
                    suspended: n.is_suspended(),
                }
            })
            .collect();
        let aggregates = Aggregates::from_samples(&per_node);
        Snapshot {
            time,
            per_node,
            aggregates,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSample> {
        self.per_node
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.per_node[i])
    }
}

/// One line of `snapshots.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SnapshotRow {
    pub time: f64,
    pub mean_dg_peers: f64,
    pub mean_ug_peers: f64,
    pub mean_dg_all: f64,
    pub mean_ug_all: f64,
    pub alive_peers: usize,
    pub suspended: usize,
    #[serde(skip)]
    pub mean_dg_superpeers: f64,
}

impl SnapshotRow {
    pub fn new(time: SimTime, a: &Aggregates) -> Self {
        SnapshotRow {
            time: time.seconds(),
            mean_dg_peers: a.mean_dg_peers,
            mean_ug_peers: a.mean_ug_peers,
            mean_dg_all: a.mean_dg_all,
            mean_ug_all: a.mean_ug_all,
            alive_peers: a.alive_peers,
            suspended: a.suspended,
            mean_dg_superpeers: a.mean_dg_superpeers,
        }
    }
}

/// One line of `trace_<id>.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub time: f64,
    pub dg: f64,
    pub ug_per_conn: f64,
    pub n_in: usize,
    pub n_out: usize,
}

/// Window summary feeding one sweep row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryRow {
    pub mean_dg: f64,
    pub mean_ug: f64,
    pub mean_dg_superpeers: f64,
    pub samples: usize,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    rows: Vec<SnapshotRow>,
    traces: BTreeMap<NodeId, Vec<TracePoint>>,
}

impl MetricsLog {
    pub fn new(tracked: &[NodeId]) -> Self {
        MetricsLog {
            rows: Vec::new(),
            traces: tracked.iter().map(|&id| (id, Vec::new())).collect(),
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.traces.keys().copied()
    }

    pub fn rows(&self) -> &[SnapshotRow] {
        &self.rows
    }

    pub fn record(&mut self, snapshot: &Snapshot) {
        self.rows.push(SnapshotRow::new(snapshot.time, &snapshot.aggregates));
        for (id, series) in self.traces.iter_mut() {
            if let Some(s) = snapshot.node(*id) {
                series.push(TracePoint {
                    time: snapshot.time.seconds(),
                    dg: s.dg,
                    ug_per_conn: s.ug_per_conn,
                    n_in: s.n_in,
                    n_out: s.n_out,
                });
            }
        }
    }

    pub fn per_node_series(&self, id: NodeId) -> Result<&[TracePoint], MetricsError> {
        self.traces
            .get(&id)
            .map(Vec::as_slice)
            .ok_or(MetricsError::UnknownNode(id))
    }

    pub fn write_snapshots_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_csv(out, &self.rows, &SNAPSHOT_HEADER)
    }

    pub fn write_trace_csv<W: Write>(&self, id: NodeId, out: W) -> Result<csv::Result<()>, MetricsError> {
        let series = self.per_node_series(id)?;
        Ok(write_csv(out, series, &TRACE_HEADER))
    }
}

const SNAPSHOT_HEADER: [&str; 7] = [
    "time",
    "mean_dg_peers",
    "mean_ug_peers",
    "mean_dg_all",
    "mean_ug_all",
    "alive_peers",
    "suspended",
];
const TRACE_HEADER: [&str; 5] = ["time", "dg", "ug_per_conn", "n_in", "n_out"];

/// Writes the header explicitly so an empty series still yields one.
pub(crate) fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T], header: &[&str]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Averages the per-epoch peer means over snapshots with
/// `from <= time <= to`. Epochs are equally spaced, so the sample mean is
/// the time average.
pub fn aggregate_over_window(rows: &[SnapshotRow], from: f64, to: f64) -> Result<SummaryRow, MetricsError> {
    if from >= to {
        return Err(MetricsError::InvalidWindow { from, to });
    }
    let window: Vec<&SnapshotRow> = rows.iter().filter(|r| r.time >= from && r.time <= to).collect();
    if window.is_empty() {
        return Err(MetricsError::EmptyWindow { from, to });
    }
    let n = window.len() as f64;
    Ok(SummaryRow {
        mean_dg: window.iter().map(|r| r.mean_dg_peers).sum::<f64>() / n,
        mean_ug: window.iter().map(|r| r.mean_ug_peers).sum::<f64>() / n,
        mean_dg_superpeers: window.iter().map(|r| r.mean_dg_superpeers).sum::<f64>() / n,
        samples: window.len(),
    })
}
