//! Random overlay generators and an independent brute-force goodput oracle.
#![allow(dead_code)]

use p2ptv_sim::model::{ChannelId, NodeRecord};
use p2ptv_sim::{NodeClass, NodeId, OverlayGraph};
use rand::Rng;

pub fn record(id: u32, class: NodeClass, repeatability: f64, dg_max: f64, slots: usize) -> NodeRecord {
    NodeRecord {
        id: NodeId(id),
        class,
        repeatability,
        dg_max,
        max_out: slots,
        max_in: slots,
        channel: ChannelId(0),
        alive: true,
        suspended_until: None,
    }
}

/// A random node of any class respecting the class rules.
pub fn random_record<R: Rng>(rng: &mut R, id: u32, slots: usize) -> NodeRecord {
    match rng.random_range(0..6) {
        0 => record(id, NodeClass::Source, 1.0, 1.5, slots),
        1 => record(id, NodeClass::Superpeer, rng.random_range(1.0..3.0), 2.0, slots),
        _ => record(id, NodeClass::Peer, rng.random_range(0.0..=1.0), rng.random_range(0.5..=1.0), slots),
    }
}

/// Random graph on `n` nodes. With `acyclic`, uploaders always precede
/// their downloaders in id order.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, acyclic: bool, density: f64) -> OverlayGraph {
    let mut g = OverlayGraph::new();
    for id in 0..n as u32 {
        g.insert_node(random_record(rng, id, n)).unwrap();
    }
    for d in 0..n as u32 {
        for u in 0..n as u32 {
            if d == u || (acyclic && u > d) || !rng.random_bool(density) {
                continue;
            }
            // Sources never download; such pairs are simply skipped.
            let _ = g.add_edge(NodeId(d), NodeId(u));
        }
    }
    g
}

/// Applies the goodput update to every node simultaneously, `rounds` times,
/// starting from zero download goodput everywhere except sources.
pub fn jacobi_oracle(g: &OverlayGraph, rounds: usize) -> Vec<(NodeId, f64, f64)> {
    let nodes: Vec<&NodeRecord> = g.nodes().filter(|n| n.is_active()).collect();
    let bound = g.id_bound();
    let mut dg = vec![0.0; bound];
    let mut ug = vec![0.0; bound];
    let rate = |n: &NodeRecord, dg: f64| {
        let k = g.incoming(n.id).len();
        if k == 0 {
            0.0
        } else {
            n.repeatability * dg / k as f64
        }
    };
    for n in &nodes {
        if n.class == NodeClass::Source {
            dg[n.id.index()] = n.dg_max;
            ug[n.id.index()] = rate(n, n.dg_max);
        }
    }
    for _ in 0..rounds {
        let prev = ug.clone();
        for n in &nodes {
            if n.class == NodeClass::Source {
                continue;
            }
            let inflow: f64 = g.outgoing(n.id).iter().map(|u| prev[u.index()]).sum();
            let v = inflow.min(n.dg_max);
            dg[n.id.index()] = v;
            ug[n.id.index()] = rate(n, v);
        }
    }
    nodes.iter().map(|n| (n.id, dg[n.id.index()], ug[n.id.index()])).collect()
}
