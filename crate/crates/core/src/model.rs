//! Overlay entities: node classes and parameters, and the directed connection
//! graph.
//!
//! Direction convention: an edge `(downloader, uploader)` means `downloader`
//! pulls the stream from `uploader`. The edge is an *outgoing* connection of
//! the downloader and an *incoming* connection of the uploader, so the
//! incoming count of a node is the number of neighbours it uploads to.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(pub u32);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeClass {
    Source,
    Superpeer,
    Peer,
}

impl NodeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeClass::Source => "source",
            NodeClass::Superpeer => "superpeer",
            NodeClass::Peer => "peer",
        }
    }
}

impl fmt::Display for NodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeClass {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(NodeClass::Source),
            "superpeer" => Ok(NodeClass::Superpeer),
            "peer" => Ok(NodeClass::Peer),
            other => Err(ModelError::Parse(format!("unknown node class `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub class: NodeClass,
    /// Stream repeatability coefficient: share of the received stream a node
    /// re-forwards in total over its incoming connections.
    pub repeatability: f64,
    /// Cap on download goodput.
    pub dg_max: f64,
    pub max_out: usize,
    pub max_in: usize,
    pub channel: ChannelId,
    pub alive: bool,
    /// Set while the node is backing off after an unwatchable period.
    pub suspended_until: Option<SimTime>,
}

impl NodeRecord {
    pub fn is_suspended(&self) -> bool {
        self.suspended_until.is_some()
    }

    /// Alive and not backing off: the node takes part in the stream.
    pub fn is_active(&self) -> bool {
        self.alive && !self.is_suspended()
    }

    pub fn check_class_invariants(&self) -> Result<(), ModelError> {
        let bad = |what: &str| {
            Err(ModelError::ClassInvariant {
                id: self.id,
                class: self.class,
                detail: what.to_string(),
            })
        };
        if !(self.repeatability.is_finite() && self.repeatability >= 0.0) {
            return bad("repeatability must be finite and non-negative");
        }
        if !(self.dg_max.is_finite() && self.dg_max > 0.0) {
            return bad("dg_max must be finite and positive");
        }
        match self.class {
            NodeClass::Peer => {
                if self.repeatability > 1.0 {
                    return bad("peer repeatability must be <= 1");
                }
                if !(PEER_DG_MAX_LOW..=PEER_DG_MAX_HIGH).contains(&self.dg_max) {
                    return bad("peer dg_max must lie in [0.5, 1.0]");
                }
            }
            NodeClass::Superpeer => {
                if self.repeatability < 1.0 {
                    return bad("superpeer repeatability must be >= 1");
                }
            }
            NodeClass::Source => {
                if self.repeatability != 1.0 {
                    return bad("source repeatability must be exactly 1");
                }
            }
        }
        Ok(())
    }
}

pub const PEER_DG_MAX_LOW: f64 = 0.5;
pub const PEER_DG_MAX_HIGH: f64 = 1.0;
pub const DEFAULT_SOURCE_DG_MAX: f64 = 1.5;
pub const DEFAULT_SUPERPEER_DG_MAX: f64 = 2.0;

/// Per-class parameters applied by [`make_node`].
#[derive(Clone, Debug, PartialEq)]
pub struct NodeParameters {
    /// Connection limit applied to both directions unless overridden.
    pub max_connections: usize,
    pub max_in: Option<usize>,
    pub max_out: Option<usize>,
    /// Limit of superpeers in both directions, overriding the defaults.
    pub superpeer_max_connections: Option<usize>,
    /// Incoming limit of sources, overriding `max_in`.
    pub source_max_in: Option<usize>,
    pub peer_repeatability: f64,
    pub superpeer_repeatability: f64,
    /// Replaces the uniform peer `dg_max` draw when set.
    pub peer_dg_max_fixed: Option<f64>,
    pub superpeer_dg_max: f64,
    pub source_dg_max: f64,
}

impl Default for NodeParameters {
    fn default() -> Self {
        Self {
            max_connections: 8,
            max_in: None,
            max_out: None,
            superpeer_max_connections: None,
            source_max_in: None,
            peer_repeatability: 1.0,
            superpeer_repeatability: 1.0,
            peer_dg_max_fixed: None,
            superpeer_dg_max: DEFAULT_SUPERPEER_DG_MAX,
            source_dg_max: DEFAULT_SOURCE_DG_MAX,
        }
    }
}

/// Creates a node of `class`. Peers draw `dg_max` uniformly from [0.5, 1.0]
/// unless a fixed value is configured; the draw is the only RNG use.
pub fn make_node<R: Rng + ?Sized>(
    class: NodeClass,
    id: NodeId,
    channel: ChannelId,
    rng: &mut R,
    params: &NodeParameters,
) -> Result<NodeRecord, ModelError> {
    let (repeatability, dg_max) = match class {
        NodeClass::Source => (1.0, params.source_dg_max),
        NodeClass::Superpeer => (params.superpeer_repeatability, params.superpeer_dg_max),
        NodeClass::Peer => {
            let dg_max = match params.peer_dg_max_fixed {
                Some(fixed) => fixed,
                None => rng.random_range(PEER_DG_MAX_LOW..=PEER_DG_MAX_HIGH),
            };
            (params.peer_repeatability, dg_max)
        }
    };
    let mut max_in = params.max_in.unwrap_or(params.max_connections);
    let mut max_out = params.max_out.unwrap_or(params.max_connections);
    match class {
        NodeClass::Source => max_in = params.source_max_in.unwrap_or(max_in),
        NodeClass::Superpeer => {
            if let Some(limit) = params.superpeer_max_connections {
                (max_in, max_out) = (limit, limit);
            }
        }
        NodeClass::Peer => {}
    }
    let record = NodeRecord {
        id,
        class,
        repeatability,
        dg_max,
        max_out,
        max_in,
        channel,
        alive: true,
        suspended_until: None,
    };
    record.check_class_invariants()?;
    Ok(record)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Connections a node downloads over.
    Outgoing,
    /// Connections a node uploads over.
    Incoming,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("node {0} does not exist")]
    MissingNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("edge {downloader} -> {uploader} does not exist")]
    MissingEdge { downloader: NodeId, uploader: NodeId },
    #[error("edge {downloader} -> {uploader} already exists")]
    DuplicateEdge { downloader: NodeId, uploader: NodeId },
    #[error("node {node} is at its {direction:?} connection limit")]
    CapacityExceeded { node: NodeId, direction: Direction },
    #[error("source {0} cannot download")]
    SourceAsDownloader(NodeId),
    #[error("node {0} cannot connect to itself")]
    SelfLoop(NodeId),
    #[error("nodes {0} and {1} are on different channels")]
    ChannelMismatch(NodeId, NodeId),
    #[error("node {0} is not active")]
    Inactive(NodeId),
    #[error("{class} {id}: {detail}")]
    ClassInvariant {
        id: NodeId,
        class: NodeClass,
        detail: String,
    },
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error("edge list parse error: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    record: NodeRecord,
    outgoing: Vec<NodeId>,
    incoming: Vec<NodeId>,
}

/// Directed overlay graph with per-node connection lists.
///
/// Node ids index a dense slot table; removed ids leave an empty slot and are
/// never handed out again by the simulation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OverlayGraph {
    slots: Vec<Option<Slot>>,
    node_count: usize,
    edge_count: usize,
}

impl OverlayGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// One past the largest id ever inserted.
    pub fn id_bound(&self) -> usize {
        self.slots.len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.slot(id).is_some()
    }

    fn slot(&self, id: NodeId) -> Option<&Slot> {
        self.slots.get(id.index()).and_then(Option::as_ref)
    }

    fn slot_mut(&mut self, id: NodeId) -> Result<&mut Slot, ModelError> {
        self.slots
            .get_mut(id.index())
            .and_then(Option::as_mut)
            .ok_or(ModelError::MissingNode(id))
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeRecord> {
        self.slot(id).map(|s| &s.record)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> + '_ {
        self.slots.iter().flatten().map(|s| &s.record)
    }

    /// Uploaders `id` downloads from.
    pub fn outgoing(&self, id: NodeId) -> &[NodeId] {
        self.slot(id).map_or(&[], |s| &s.outgoing)
    }

    /// Downloaders `id` uploads to.
    pub fn incoming(&self, id: NodeId) -> &[NodeId] {
        self.slot(id).map_or(&[], |s| &s.incoming)
    }

    pub fn has_edge(&self, downloader: NodeId, uploader: NodeId) -> bool {
        self.outgoing(downloader).contains(&uploader)
    }

    /// All edges as `(downloader, uploader)`, ordered by downloader id and
    /// then by connection age.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.slots
            .iter()
            .flatten()
            .flat_map(|s| s.outgoing.iter().map(move |&u| (s.record.id, u)))
    }

    pub fn insert_node(&mut self, record: NodeRecord) -> Result<(), ModelError> {
        let idx = record.id.index();
        if idx >= self.slots.len() {
            self.slots.resize(idx + 1, None);
        }
        if self.slots[idx].is_some() {
            return Err(ModelError::DuplicateNode(record.id));
        }
        self.slots[idx] = Some(Slot {
            record,
            outgoing: Vec::new(),
            incoming: Vec::new(),
        });
        self.node_count += 1;
        Ok(())
    }

    pub fn set_suspended(&mut self, id: NodeId, until: Option<SimTime>) -> Result<(), ModelError> {
        self.slot_mut(id)?.record.suspended_until = until;
        Ok(())
    }

    /// Checks every precondition of [`OverlayGraph::add_edge`] without
    /// mutating.
    pub fn can_add_edge(&self, downloader: NodeId, uploader: NodeId) -> Result<(), ModelError> {
        self.check_edge(downloader, uploader, true)
    }

    /// As [`OverlayGraph::can_add_edge`] but ignores the downloader's own
    /// outgoing limit, for a connection that replaces an existing one.
    pub fn can_replace_edge(&self, downloader: NodeId, uploader: NodeId) -> Result<(), ModelError> {
        self.check_edge(downloader, uploader, false)
    }

    fn check_edge(&self, downloader: NodeId, uploader: NodeId, check_out: bool) -> Result<(), ModelError> {
        let d = self.slot(downloader).ok_or(ModelError::MissingNode(downloader))?;
        let u = self.slot(uploader).ok_or(ModelError::MissingNode(uploader))?;
        if downloader == uploader {
            return Err(ModelError::SelfLoop(downloader));
        }
        if d.record.class == NodeClass::Source {
            return Err(ModelError::SourceAsDownloader(downloader));
        }
        for s in [d, u] {
            if !s.record.is_active() {
                return Err(ModelError::Inactive(s.record.id));
            }
        }
        if d.record.channel != u.record.channel {
            return Err(ModelError::ChannelMismatch(downloader, uploader));
        }
        if d.outgoing.contains(&uploader) {
            return Err(ModelError::DuplicateEdge {
                downloader,
                uploader,
            });
        }
        if check_out && d.outgoing.len() >= d.record.max_out {
            return Err(ModelError::CapacityExceeded {
                node: downloader,
                direction: Direction::Outgoing,
            });
        }
        if u.incoming.len() >= u.record.max_in {
            return Err(ModelError::CapacityExceeded {
                node: uploader,
                direction: Direction::Incoming,
            });
        }
        Ok(())
    }

    pub fn add_edge(&mut self, downloader: NodeId, uploader: NodeId) -> Result<(), ModelError> {
        self.can_add_edge(downloader, uploader)?;
        self.slot_mut(downloader)?.outgoing.push(uploader);
        self.slot_mut(uploader)?.incoming.push(downloader);
        self.edge_count += 1;
        Ok(())
    }

    pub fn remove_edge(&mut self, downloader: NodeId, uploader: NodeId) -> Result<(), ModelError> {
        if !self.contains(uploader) || !self.has_edge(downloader, uploader) {
            return Err(ModelError::MissingEdge {
                downloader,
                uploader,
            });
        }
        self.slot_mut(downloader)?.outgoing.retain(|&u| u != uploader);
        self.slot_mut(uploader)?.incoming.retain(|&d| d != downloader);
        self.edge_count -= 1;
        Ok(())
    }

    /// Removes every edge incident to `id`, returning how many were dropped.
    pub fn drop_edges(&mut self, id: NodeId) -> Result<usize, ModelError> {
        let slot = self.slot_mut(id)?;
        let outgoing = std::mem::take(&mut slot.outgoing);
        let incoming = std::mem::take(&mut slot.incoming);
        for &u in &outgoing {
            self.slot_mut(u)?.incoming.retain(|&d| d != id);
        }
        for &d in &incoming {
            self.slot_mut(d)?.outgoing.retain(|&u| u != id);
        }
        let dropped = outgoing.len() + incoming.len();
        self.edge_count -= dropped;
        Ok(dropped)
    }

    /// Removes the node and all incident edges; the returned record is
    /// marked dead.
    pub fn remove_node(&mut self, id: NodeId) -> Result<NodeRecord, ModelError> {
        self.drop_edges(id)?;
        let slot = self.slots[id.index()].take().expect("checked by drop_edges");
        self.node_count -= 1;
        let mut record = slot.record;
        record.alive = false;
        Ok(record)
    }

    /// Verifies class parameters, capacity limits, direction symmetry and
    /// edge legality for the whole graph.
    pub fn check_invariants(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Invariant(msg));
        let mut edges = 0;
        for slot in self.slots.iter().flatten() {
            let r = &slot.record;
            r.check_class_invariants()?;
            if slot.outgoing.len() > r.max_out {
                return fail(format!("node {} exceeds max_out", r.id));
            }
            if slot.incoming.len() > r.max_in {
                return fail(format!("node {} exceeds max_in", r.id));
            }
            if r.class == NodeClass::Source && !slot.outgoing.is_empty() {
                return fail(format!("source {} downloads", r.id));
            }
            if !r.is_active() && !(slot.outgoing.is_empty() && slot.incoming.is_empty()) {
                return fail(format!("inactive node {} holds edges", r.id));
            }
            for (i, &u) in slot.outgoing.iter().enumerate() {
                if u == r.id {
                    return fail(format!("self-loop on {}", r.id));
                }
                if slot.outgoing[..i].contains(&u) {
                    return fail(format!("duplicate edge {} -> {}", r.id, u));
                }
                let Some(up) = self.slot(u) else {
                    return fail(format!("edge {} -> {} to missing node", r.id, u));
                };
                if !up.incoming.contains(&r.id) {
                    return fail(format!("edge {} -> {} missing on uploader side", r.id, u));
                }
                if up.record.channel != r.channel {
                    return fail(format!("edge {} -> {} crosses channels", r.id, u));
                }
            }
            for &d in &slot.incoming {
                if !self.outgoing(d).contains(&r.id) {
                    return fail(format!("edge {} -> {} missing on downloader side", d, r.id));
                }
            }
            edges += slot.outgoing.len();
        }
        if edges != self.edge_count {
            return fail(format!(
                "edge counter {} disagrees with {} stored edges",
                self.edge_count, edges
            ));
        }
        Ok(())
    }

    /// Writes the node table (`id class R dg_max channel`) followed by the
    /// edge list (`downloader_id uploader_id`).
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# nodes: id class R dg_max channel")?;
        for r in self.nodes() {
            writeln!(
                out,
                "{} {} {} {} {}",
                r.id, r.class, r.repeatability, r.dg_max, r.channel
            )?;
        }
        writeln!(out, "# edges: downloader_id uploader_id")?;
        for (d, u) in self.edges() {
            writeln!(out, "{d} {u}")?;
        }
        Ok(())
    }

    /// Parses the format produced by [`OverlayGraph::write_edge_list`].
    /// Connection limits are not part of the format and are taken from
    /// `max_connections`.
    pub fn parse_edge_list(text: &str, max_connections: usize) -> Result<Self, ModelError> {
        let mut graph = OverlayGraph::new();
        let mut in_edges = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                in_edges = header.trim_start().starts_with("edges");
                continue;
            }
            let err = |what: &str| ModelError::Parse(format!("line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let id = |s: &str| s.parse::<u32>().map(NodeId).map_err(|_| err("bad node id"));
            if in_edges {
                let [d, u] = fields[..] else {
                    return Err(err("expected `downloader uploader`"));
                };
                graph.add_edge(id(d)?, id(u)?)?;
            } else {
                let [i, class, r, dg, ch] = fields[..] else {
                    return Err(err("expected `id class R dg_max channel`"));
                };
                let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
                graph.insert_node(NodeRecord {
                    id: id(i)?,
                    class: class.parse()?,
                    repeatability: num(r)?,
                    dg_max: num(dg)?,
                    max_out: max_connections,
                    max_in: max_connections,
                    channel: ChannelId(ch.parse().map_err(|_| err("bad channel"))?),
                    alive: true,
                    suspended_until: None,
                })?;
            }
        }
        Ok(graph)
    }
}
