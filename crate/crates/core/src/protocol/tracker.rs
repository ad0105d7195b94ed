use std::collections::BTreeMap;

use log::debug;
use rand::seq::index;
use rand::Rng;

use crate::model::{ChannelId, NodeId};
use crate::solver::GoodputAssignment;

/// A tracker answer: a registered node and the per-connection upload goodput
/// it currently advertises.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub id: NodeId,
    pub advertised: f64,
}

#[derive(Clone, Debug, Default)]
struct Members {
    ids: Vec<NodeId>,
}

/// Central registry of active nodes per channel.
#[derive(Clone, Debug)]
pub struct Tracker {
    registry: BTreeMap<ChannelId, Members>,
    // position of each registered node inside its channel's member list
    position: Vec<Option<(ChannelId, usize)>>,
    sample_size: usize,
}

impl Tracker {
    pub fn new(sample_size: usize) -> Self {
        Self {
            registry: BTreeMap::new(),
            position: Vec::new(),
            sample_size,
        }
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    pub fn is_registered(&self, id: NodeId) -> bool {
        self.position.get(id.index()).is_some_and(Option::is_some)
    }

    pub fn channel_len(&self, channel: ChannelId) -> usize {
        self.registry.get(&channel).map_or(0, |m| m.ids.len())
    }

    pub fn channels(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.registry.keys().copied()
    }

    pub fn register(&mut self, id: NodeId, channel: ChannelId) {
        if self.is_registered(id) {
            debug!("tracker: node {id} already registered");
            return;
        }
        if id.index() >= self.position.len() {
            self.position.resize(id.index() + 1, None);
        }
        let members = self.registry.entry(channel).or_default();
        self.position[id.index()] = Some((channel, members.ids.len()));
        members.ids.push(id);
    }

    pub fn unregister(&mut self, id: NodeId) {
        let Some((channel, pos)) = self.position.get_mut(id.index()).and_then(Option::take) else {
            debug!("tracker: node {id} was not registered");
            return;
        };
        let members = self.registry.get_mut(&channel).expect("registered channel");
        members.ids.swap_remove(pos);
        if let Some(&moved) = members.ids.get(pos) {
            self.position[moved.index()] = Some((channel, pos));
        }
    }

    /// Uniform sample without replacement of up to `sample_size` registered
    /// nodes on `channel`, never including `requester`.
    pub fn sample<R: Rng + ?Sized>(&self, channel: ChannelId, requester: NodeId, rng: &mut R) -> Vec<NodeId> {
        let Some(members) = self.registry.get(&channel) else {
            return Vec::new();
        };
        let ids = &members.ids;
        let requester_pos = match self.position.get(requester.index()) {
            Some(&Some((ch, pos))) if ch == channel => Some(pos),
            _ => None,
        };
        let eligible = ids.len() - usize::from(requester_pos.is_some());
        let k = self.sample_size.min(eligible);
        if k == 0 {
            return Vec::new();
        }
        // Sample over the index space with the requester's slot skipped.
        index::sample(rng, eligible, k)
            .into_iter()
            .map(|i| match requester_pos {
                Some(p) if i >= p => ids[i + 1],
                _ => ids[i],
            })
            .collect()
    }

    pub fn sample_advertised<R: Rng + ?Sized>(
        &self,
        channel: ChannelId,
        requester: NodeId,
        rng: &mut R,
        assignment: &GoodputAssignment,
    ) -> Vec<Candidate> {
        self.sample(channel, requester, rng)
            .into_iter()
            .map(|id| Candidate {
                id,
                advertised: assignment.ug_per_conn(id),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CH0: ChannelId = ChannelId(0);

    #[test]
    fn single_other_node_is_returned() {
        let mut t = Tracker::new(50);
        t.register(NodeId(1), CH0);
        t.register(NodeId(2), CH0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(t.sample(CH0, NodeId(1), &mut rng), vec![NodeId(2)]);
    }

    #[test]
    fn lone_requester_gets_nothing() {
        let mut t = Tracker::new(50);
        t.register(NodeId(4), CH0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(t.sample(CH0, NodeId(4), &mut rng).is_empty());
        assert!(t.sample(ChannelId(9), NodeId(4), &mut rng).is_empty());
    }

    #[test]
    fn unregistered_node_never_sampled() {
        let mut t = Tracker::new(3);
        for i in 0..6 {
            t.register(NodeId(i), CH0);
        }
        t.unregister(NodeId(2));
        t.unregister(NodeId(2));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = t.sample(CH0, NodeId(0), &mut rng);
            assert_eq!(s.len(), 3);
            assert!(!s.contains(&NodeId(2)));
            assert!(!s.contains(&NodeId(0)));
        }
    }

    #[test]
    fn channels_are_isolated() {
        let mut t = Tracker::new(10);
        t.register(NodeId(1), ChannelId(1));
        t.register(NodeId(2), ChannelId(2));
        t.register(NodeId(3), ChannelId(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t.sample(ChannelId(2), NodeId(3), &mut rng), vec![NodeId(2)]);
        assert_eq!(t.channels().count(), 2);
    }

    #[test]
    fn double_register_is_idempotent() {
        let mut t = Tracker::new(10);
        t.register(NodeId(1), CH0);
        t.register(NodeId(1), CH0);
        assert_eq!(t.channel_len(CH0), 1);
    }

    #[test]
    fn samples_are_uniform() {
        let mut t = Tracker::new(1);
        for i in 0..10 {
            t.register(NodeId(i), CH0);
        }
        // Requester is registered elsewhere so all ten nodes are eligible.
        t.register(NodeId(99), ChannelId(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..trials {
            let s = t.sample(CH0, NodeId(99), &mut rng);
            counts[s[0].index()] += 1;
        }
        let p: f64 = 0.1;
        let expected = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-squared with 9 degrees of freedom.
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn requester_excluded_and_uniform_over_rest() {
        let mut t = Tracker::new(1);
        for i in 0..5 {
            t.register(NodeId(i), CH0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 5];
        for _ in 0..8000 {
            counts[t.sample(CH0, NodeId(2), &mut rng)[0].index()] += 1;
        }
        assert_eq!(counts[2], 0);
        for (i, c) in counts.iter().enumerate().filter(|(i, _)| *i != 2) {
            assert!((*c as f64 - 2000.0).abs() < 3.0 * (8000.0f64 * 0.25 * 0.75).sqrt(), "{i}: {c}");
        }
    }
}
