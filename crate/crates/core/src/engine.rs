//! Deterministic discrete-event kernel.
//!
//! Events are ordered by `(fire_at, sequence)`; the sequence number is assigned
//! at insertion so simultaneous events pop in the order they were scheduled.
//! Handlers run in zero simulated time.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Simulated time in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics on negative or non-finite input.
    pub fn new(seconds: f64) -> Self {
        assert!(
            seconds.is_finite() && seconds >= 0.0,
            "invalid simulated time {seconds}"
        );
        SimTime(seconds)
    }

    pub fn seconds(self) -> f64 {
        self.0
    }

    pub fn after(self, delay: f64) -> Self {
        SimTime::new(self.0 + delay)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event<K> {
    pub fire_at: SimTime,
    pub sequence: u64,
    pub kind: K,
}

// Min-heap adapter: BinaryHeap is a max-heap, so the comparison is reversed.
struct Queued<K>(Event<K>);

impl<K> Queued<K> {
    fn key(&self) -> (f64, u64) {
        (self.0.fire_at.0, self.0.sequence)
    }
}

impl<K> PartialEq for Queued<K> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<K> Eq for Queued<K> {}

impl<K> PartialOrd for Queued<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Queued<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, sa) = self.key();
        let (tb, sb) = other.key();
        tb.total_cmp(&ta).then(sb.cmp(&sa))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    ScheduledInPast { at: SimTime, now: SimTime },
}

/// Receives events popped by [`Engine::run_until`].
pub trait Handler<K> {
    type Error;

    fn handle(&mut self, engine: &mut Engine<K>, event: Event<K>) -> Result<(), Self::Error>;
}

/// Clock, event queue and the single RNG stream of one simulation instance.
pub struct Engine<K> {
    now: SimTime,
    next_sequence: u64,
    queue: BinaryHeap<Queued<K>>,
    rng: ChaCha8Rng,
}

impl<K> Engine<K> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, fire_at: SimTime, kind: K) -> Result<(), EngineError> {
        if fire_at < self.now {
            return Err(EngineError::ScheduledInPast {
                at: fire_at,
                now: self.now,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Queued(Event {
            fire_at,
            sequence,
            kind,
        }));
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: f64, kind: K) -> Result<(), EngineError> {
        let at = self.now.after(delay);
        self.schedule(at, kind)
    }

    /// Pops the next event if it fires no later than `end`, advancing the clock.
    pub fn pop_until(&mut self, end: SimTime) -> Option<Event<K>> {
        match self.queue.peek() {
            Some(head) if head.0.fire_at <= end => {
                let Queued(event) = self.queue.pop().expect("peeked");
                debug_assert!(event.fire_at >= self.now);
                self.now = event.fire_at;
                Some(event)
            }
            _ => None,
        }
    }

    /// Processes every event with `fire_at <= end` in order, then sets the
    /// clock to `end`. Returns the number of events processed.
    pub fn run_until<H>(&mut self, end: SimTime, handler: &mut H) -> Result<u64, H::Error>
    where
        H: Handler<K>,
    {
        let mut processed = 0;
        while let Some(event) = self.pop_until(end) {
            handler.handle(self, event)?;
            processed += 1;
        }
        if end > self.now {
            self.now = end;
        }
        Ok(processed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Recorder(Vec<(f64, &'static str)>);

    impl Handler<&'static str> for Recorder {
        type Error = EngineError;

        fn handle(
            &mut self,
            _engine: &mut Engine<&'static str>,
            event: Event<&'static str>,
        ) -> Result<(), EngineError> {
            self.0.push((event.fire_at.seconds(), event.kind));
            Ok(())
        }
    }

    #[test]
    fn pops_in_time_order() {
        let mut engine = Engine::new(1);
        engine.schedule(SimTime::new(5.0), "e").unwrap();
        engine.schedule(SimTime::new(3.0), "e'").unwrap();
        let mut rec = Recorder(Vec::new());
        engine.run_until(SimTime::new(10.0), &mut rec).unwrap();
        assert_eq!(rec.0, vec![(3.0, "e'"), (5.0, "e")]);
    }

    #[test]
    fn ties_pop_in_insertion_order() {
        let mut engine = Engine::new(1);
        for name in ["a", "b", "c", "d"] {
            engine.schedule(SimTime::new(2.0), name).unwrap();
        }
        let mut rec = Recorder(Vec::new());
        engine.run_until(SimTime::new(2.0), &mut rec).unwrap();
        let names: Vec<_> = rec.0.iter().map(|(_, n)| *n).collect();
        assert_eq!(names, ["a", "b", "c", "d"]);
    }

    #[test]
    fn scheduling_at_now_fires_before_clock_advances() {
        struct AtNow(Vec<(f64, &'static str)>);
        impl Handler<&'static str> for AtNow {
            type Error = EngineError;
            fn handle(
                &mut self,
                engine: &mut Engine<&'static str>,
                event: Event<&'static str>,
            ) -> Result<(), EngineError> {
                self.0.push((engine.now().seconds(), event.kind));
                if event.kind == "first" {
                    engine.schedule(engine.now(), "same-instant")?;
                }
                Ok(())
            }
        }
        let mut engine = Engine::new(1);
        engine.schedule(SimTime::new(1.0), "first").unwrap();
        engine.schedule(SimTime::new(2.0), "later").unwrap();
        let mut rec = AtNow(Vec::new());
        engine.run_until(SimTime::new(5.0), &mut rec).unwrap();
        assert_eq!(
            rec.0,
            vec![(1.0, "first"), (1.0, "same-instant"), (2.0, "later")]
        );
    }

    #[test]
    fn past_scheduling_is_rejected() {
        let mut engine: Engine<&str> = Engine::new(1);
        let mut rec = Recorder(Vec::new());
        engine.run_until(SimTime::new(4.0), &mut rec).unwrap();
        let err = engine.schedule(SimTime::new(3.0), "late").unwrap_err();
        assert!(matches!(err, EngineError::ScheduledInPast { .. }));
    }

    #[test]
    fn empty_queue_advances_clock_to_end() {
        let mut engine: Engine<&str> = Engine::new(1);
        let mut rec = Recorder(Vec::new());
        let n = engine.run_until(SimTime::new(10.0), &mut rec).unwrap();
        assert_eq!(n, 0);
        assert_eq!(engine.now(), SimTime::new(10.0));
    }

    #[test]
    fn end_boundary_is_inclusive() {
        let mut engine = Engine::new(1);
        for (t, name) in [(1.0, "a"), (2.0, "b"), (3.0, "c")] {
            engine.schedule(SimTime::new(t), name).unwrap();
        }
        let mut rec = Recorder(Vec::new());
        assert_eq!(engine.run_until(SimTime::new(2.0), &mut rec).unwrap(), 2);
        assert_eq!(engine.now(), SimTime::new(2.0));
        assert_eq!(engine.pending(), 1);
    }

    // Handler that reschedules itself at random delays; the trace must only
    // depend on the seed.
    struct Chaotic(Vec<(f64, u64)>);

    impl Handler<u64> for Chaotic {
        type Error = EngineError;
        fn handle(&mut self, engine: &mut Engine<u64>, event: Event<u64>) -> Result<(), EngineError> {
            self.0.push((event.fire_at.seconds(), event.kind));
            let fanout = engine.rng().random_range(0..3);
            for k in 0..fanout {
                let delay = engine.rng().random::<f64>() * 2.0;
                engine.schedule_in(delay, event.kind * 3 + k)?;
            }
            Ok(())
        }
    }

    fn chaotic_trace(seed: u64) -> Vec<(f64, u64)> {
        let mut engine = Engine::new(seed);
        engine.schedule(SimTime::ZERO, 1).unwrap();
        engine.schedule(SimTime::ZERO, 2).unwrap();
        let mut h = Chaotic(Vec::new());
        engine.run_until(SimTime::new(50.0), &mut h).unwrap();
        h.0
    }

    #[test]
    fn identical_seed_gives_identical_trace() {
        let a = chaotic_trace(42);
        let b = chaotic_trace(42);
        assert!(!a.is_empty());
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].0 <= w[1].0));
    }
}
