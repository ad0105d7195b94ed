//! Uploader selection for a single maintenance round.

use std::cmp::Ordering;

use crate::model::{NodeId, OverlayGraph};
use crate::solver::GoodputAssignment;

use super::tracker::Candidate;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    Connect { downloader: NodeId, uploader: NodeId },
    Disconnect { downloader: NodeId, uploader: NodeId },
}

/// Orders candidates best first: higher advertised goodput, then lower id.
pub fn rank(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| {
        b.advertised
            .partial_cmp(&a.advertised)
            .unwrap_or(Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
}

/// One maintenance round for `peer`.
///
/// A peer with free download slots connects to the best-ranked candidates it
/// is not yet connected to, skipping uploaders with no free upload slot. A
/// full peer replaces its worst current uploader with the best reachable
/// candidate when the candidate advertises strictly more, at most once per
/// round. Applies the mutations to `graph` and returns them.
pub fn maintenance_round(
    graph: &mut OverlayGraph,
    assignment: &GoodputAssignment,
    peer: NodeId,
    mut candidates: Vec<Candidate>,
) -> Vec<Mutation> {
    let Some(node) = graph.node(peer) else {
        return Vec::new();
    };
    let max_out = node.max_out;
    rank(&mut candidates);
    candidates.retain(|c| c.id != peer && !graph.has_edge(peer, c.id));

    let mut applied = Vec::new();
    if graph.outgoing(peer).len() < max_out {
        for c in &candidates {
            if graph.outgoing(peer).len() >= max_out {
                break;
            }
            if graph.add_edge(peer, c.id).is_ok() {
                applied.push(Mutation::Connect {
                    downloader: peer,
                    uploader: c.id,
                });
            }
        }
        return applied;
    }

    let Some(worst) = graph
        .outgoing(peer)
        .iter()
        .map(|&u| (u, assignment.ug_per_conn(u)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)))
    else {
        return applied;
    };
    // Candidates are ranked, so the first one with a free upload slot is the
    // best reachable. Any other failure (inactive, channel) also skips.
    let best = candidates
        .iter()
        .find(|c| graph.can_replace_edge(peer, c.id).is_ok());
    if let Some(best) = best {
        if best.advertised > worst.1 {
            let before: f64 = graph.outgoing(peer).iter().map(|&u| assignment.ug_per_conn(u)).sum();
            graph.remove_edge(peer, worst.0).expect("worst is connected");
            graph.add_edge(peer, best.id).expect("checked above");
            debug_assert!(
                graph.outgoing(peer).iter().map(|&u| assignment.ug_per_conn(u)).sum::<f64>() >= before,
                "swap must not lower the advertised sum"
            );
            applied.push(Mutation::Disconnect {
                downloader: peer,
                uploader: worst.0,
            });
            applied.push(Mutation::Connect {
                downloader: peer,
                uploader: best.id,
            });
        }
    }
    applied
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::{ChannelId, NodeClass, NodeRecord};
    use crate::solver::{solve_pinned, SolverSettings};

    fn record(id: u32, class: NodeClass, max_in: usize) -> NodeRecord {
        NodeRecord {
            id: NodeId(id),
            class,
            repeatability: 1.0,
            dg_max: if class == NodeClass::Source { 1.5 } else { 1.0 },
            max_out: 2,
            max_in,
            channel: ChannelId(0),
            alive: true,
            suspended_until: None,
        }
    }

    /// Peer 0 plus sources 1..=rates.len() advertising the given rates.
    fn setup(rates: &[f64]) -> (OverlayGraph, GoodputAssignment, Vec<Candidate>) {
        setup_with_slots(rates, 4)
    }

    fn setup_with_slots(rates: &[f64], max_in: usize) -> (OverlayGraph, GoodputAssignment, Vec<Candidate>) {
        let mut g = OverlayGraph::new();
        g.insert_node(record(0, NodeClass::Peer, 4)).unwrap();
        let mut pins = BTreeMap::new();
        let mut candidates = Vec::new();
        for (i, &rate) in rates.iter().enumerate() {
            let id = NodeId(i as u32 + 1);
            g.insert_node(record(id.0, NodeClass::Source, max_in)).unwrap();
            pins.insert(id, rate);
            candidates.push(Candidate { id, advertised: rate });
        }
        let a = solve_pinned(&g, &SolverSettings::default(), &pins).unwrap();
        (g, a, candidates)
    }

    fn connect(d: u32, u: u32) -> Mutation {
        Mutation::Connect {
            downloader: NodeId(d),
            uploader: NodeId(u),
        }
    }

    #[test]
    fn ranking_breaks_ties_by_lower_id() {
        let mut c = vec![
            Candidate { id: NodeId(5), advertised: 0.2 },
            Candidate { id: NodeId(3), advertised: 0.2 },
            Candidate { id: NodeId(9), advertised: 0.7 },
        ];
        rank(&mut c);
        let ids: Vec<u32> = c.iter().map(|c| c.id.0).collect();
        assert_eq!(ids, vec![9, 3, 5]);
    }

    #[test]
    fn empty_peer_takes_the_best_candidates() {
        let (mut g, a, candidates) = setup(&[0.3, 0.5, 0.2]);
        let m = maintenance_round(&mut g, &a, NodeId(0), candidates);
        assert_eq!(m, vec![connect(0, 2), connect(0, 1)]);
        assert_eq!(g.outgoing(NodeId(0)).len(), 2);
    }

    #[test]
    fn full_uploaders_are_skipped() {
        let (mut g, a, candidates) = setup_with_slots(&[0.3, 0.5, 0.2], 1);
        g.insert_node(record(9, NodeClass::Peer, 4)).unwrap();
        g.add_edge(NodeId(9), NodeId(2)).unwrap();
        let m = maintenance_round(&mut g, &a, NodeId(0), candidates);
        assert_eq!(m, vec![connect(0, 1), connect(0, 3)]);
    }

    #[test]
    fn equal_candidate_does_not_replace() {
        let (mut g, a, mut candidates) = setup(&[0.2, 0.5, 0.2]);
        g.add_edge(NodeId(0), NodeId(1)).unwrap();
        g.add_edge(NodeId(0), NodeId(2)).unwrap();
        candidates.retain(|c| c.id == NodeId(3));
        assert!(maintenance_round(&mut g, &a, NodeId(0), candidates).is_empty());
        assert!(g.has_edge(NodeId(0), NodeId(1)));
    }

    #[test]
    fn better_candidate_replaces_the_worst_once() {
        let (mut g, a, candidates) = setup(&[0.2, 0.5, 0.4, 0.45]);
        g.add_edge(NodeId(0), NodeId(1)).unwrap();
        g.add_edge(NodeId(0), NodeId(2)).unwrap();
        let m = maintenance_round(&mut g, &a, NodeId(0), candidates);
        assert_eq!(
            m,
            vec![
                Mutation::Disconnect {
                    downloader: NodeId(0),
                    uploader: NodeId(1)
                },
                connect(0, 4),
            ]
        );
        let mut up = g.outgoing(NodeId(0)).to_vec();
        up.sort();
        assert_eq!(up, vec![NodeId(2), NodeId(4)]);
    }

    #[test]
    fn own_id_and_existing_uploaders_are_ignored() {
        let (mut g, a, mut candidates) = setup(&[0.3]);
        g.add_edge(NodeId(0), NodeId(1)).unwrap();
        candidates.push(Candidate { id: NodeId(0), advertised: 9.0 });
        assert!(maintenance_round(&mut g, &a, NodeId(0), candidates).is_empty());
    }
}
