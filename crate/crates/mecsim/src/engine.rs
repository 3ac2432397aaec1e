//! Discrete-event core: fixed-point virtual time, a deterministic event
//! queue and labelled random-number streams.
//!
//! Time is a count of whole microseconds. All ordering decisions are made
//! on `(fire_at, insertion sequence)` pairs, so two events scheduled for
//! the same instant always fire in the order they were scheduled, on every
//! platform, on every run.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A point in virtual time, stored as whole microseconds since the start
/// of the run. Microsecond resolution keeps every timestamp exact: there
/// is no floating-point clock anywhere in the simulator.
#[derive(
    Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub const fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub const fn saturating_add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }

    pub fn checked_add(self, rhs: SimTime) -> Option<SimTime> {
        self.0.checked_add(rhs.0).map(SimTime)
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl std::ops::AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}s", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Anything that can sit in the event queue. The kind string feeds the
/// per-kind counters in [`RunSummary`].
pub trait EventPayload {
    fn kind(&self) -> &'static str;
}

/// Opaque ticket returned by [`Engine::schedule`], usable once to cancel
/// the event before it fires.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct EventHandle(u64);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("cannot schedule event at {at} before current clock {now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
}

struct QueueEntry<P> {
    fire_at: SimTime,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for QueueEntry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<P> Eq for QueueEntry<P> {}

impl<P> PartialOrd for QueueEntry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for QueueEntry<P> {
    // BinaryHeap is a max-heap; reversing here turns it into a min-heap
    // on (fire_at, seq) without wrapping every entry in Reverse.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Totals for one engine, reported after a run segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub end_clock: SimTime,
    pub events_processed: u64,
    pub counts: BTreeMap<&'static str, u64>,
}

/// The event queue plus the virtual clock.
///
/// Events fire in `(fire_at, seq)` order where `seq` is the insertion
/// sequence number, so ties at one instant are broken by scheduling
/// order. Cancellation is lazy: a cancelled entry stays in the heap and
/// is discarded when it surfaces.
pub struct Engine<P> {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<QueueEntry<P>>,
    pending: BTreeSet<u64>,
    cancelled: BTreeSet<u64>,
    events_processed: u64,
    counts: BTreeMap<&'static str, u64>,
}

impl<P: EventPayload> Engine<P> {
    pub fn new() -> Self {
        Engine {
            clock: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            pending: BTreeSet::new(),
            cancelled: BTreeSet::new(),
            events_processed: 0,
            counts: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    /// Number of events scheduled but not yet fired or cancelled.
    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Queue `payload` to fire at `at`. Scheduling at the current clock is
    /// allowed; scheduling strictly in the past is an error.
    pub fn schedule(&mut self, at: SimTime, payload: P) -> Result<EventHandle, EngineError> {
        if at < self.clock {
            return Err(EngineError::ScheduleInPast {
                at,
                now: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq);
        self.queue.push(QueueEntry {
            fire_at: at,
            seq,
            payload,
        });
        Ok(EventHandle(seq))
    }

    /// Remove a pending event. Returns true if the event existed and had
    /// not fired yet; cancelling twice or after firing returns false.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.pending.remove(&handle.0) {
            self.cancelled.insert(handle.0);
            true
        } else {
            false
        }
    }

    /// Pop the next event with `fire_at <= end`, advancing the clock to
    /// its timestamp. When the queue is exhausted up to `end` the clock
    /// advances to `end` and `None` is returned.
    pub fn pop_due(&mut self, end: SimTime) -> Option<(SimTime, P)> {
        loop {
            match self.queue.peek() {
                Some(entry) if entry.fire_at <= end => {}
                _ => {
                    if end > self.clock {
                        self.clock = end;
                    }
                    return None;
                }
            }
            let entry = self.queue.pop().expect("peeked entry vanished");
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            self.pending.remove(&entry.seq);
            self.clock = entry.fire_at;
            self.events_processed += 1;
            *self.counts.entry(entry.payload.kind()).or_insert(0) += 1;
            return Some((entry.fire_at, entry.payload));
        }
    }

    /// Drain and handle every event up to and including `end`. The
    /// handler may schedule further events; newly scheduled events within
    /// the horizon fire during the same call.
    pub fn run_until(
        &mut self,
        end: SimTime,
        mut handler: impl FnMut(&mut Engine<P>, SimTime, P),
    ) -> RunSummary {
        while let Some((at, payload)) = self.pop_due(end) {
            handler(self, at, payload);
        }
        self.summary()
    }

    /// Cumulative totals since the engine was created.
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            end_clock: self.clock,
            events_processed: self.events_processed,
            counts: self.counts.clone(),
        }
    }
}

impl<P: EventPayload> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

/// Hands out independent, reproducible random streams.
///
/// Each consumer asks for a stream by label ("traffic/device/7",
/// "lengths/device/7", ...). The stream key is `SHA-256(seed || label)`,
/// so adding a new consumer or a new device never disturbs the draws an
/// existing consumer sees. That property is what keeps the legitimate
/// traffic of two runs identical when only the attack differs.
pub struct RngRegistry {
    seed: u64,
}

impl RngRegistry {
    pub fn new(seed: u64) -> Self {
        RngRegistry { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::RngCore;

    #[derive(Debug, PartialEq)]
    enum TestEv {
        Tick(u32),
        Tock,
    }

    impl EventPayload for TestEv {
        fn kind(&self) -> &'static str {
            match self {
                TestEv::Tick(_) => "tick",
                TestEv::Tock => "tock",
            }
        }
    }

    #[test]
    fn event_on_the_boundary_fires() {
        let mut eng = Engine::new();
        eng.schedule(SimTime::from_micros(5), TestEv::Tock).unwrap();
        let summary = eng.run_until(SimTime::from_micros(5), |_, _, _| {});
        assert_eq!(summary.events_processed, 1);
        assert_eq!(summary.end_clock, SimTime::from_micros(5));
    }

    #[test]
    fn same_instant_fires_in_insertion_order() {
        let mut eng = Engine::new();
        let t = SimTime::from_micros(7);
        for i in 0..3 {
            eng.schedule(t, TestEv::Tick(i)).unwrap();
        }
        let mut seen = Vec::new();
        eng.run_until(t, |_, _, ev| seen.push(ev));
        assert_eq!(seen, vec![TestEv::Tick(0), TestEv::Tick(1), TestEv::Tick(2)]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut eng = Engine::new();
        eng.schedule(SimTime::from_micros(10), TestEv::Tock)
            .unwrap();
        eng.run_until(SimTime::from_micros(10), |_, _, _| {});
        let err = eng
            .schedule(SimTime::from_micros(9), TestEv::Tock)
            .unwrap_err();
        assert_eq!(
            err,
            EngineError::ScheduleInPast {
                at: SimTime::from_micros(9),
                now: SimTime::from_micros(10),
            }
        );
        // Scheduling exactly at the clock is fine.
        assert!(eng.schedule(SimTime::from_micros(10), TestEv::Tock).is_ok());
    }

    #[test]
    fn empty_queue_still_advances_the_clock() {
        let mut eng: Engine<TestEv> = Engine::new();
        let summary = eng.run_until(SimTime::from_micros(100), |_, _, _| {});
        assert_eq!(summary.events_processed, 0);
        assert_eq!(summary.end_clock, SimTime::from_micros(100));
    }

    #[test]
    fn run_until_stops_at_the_horizon() {
        let mut eng = Engine::new();
        for us in [1, 2, 3] {
            eng.schedule(SimTime::from_micros(us), TestEv::Tock).unwrap();
        }
        let summary = eng.run_until(SimTime::from_micros(2), |_, _, _| {});
        assert_eq!(summary.events_processed, 2);
        assert_eq!(summary.end_clock, SimTime::from_micros(2));
        let summary = eng.run_until(SimTime::from_micros(3), |_, _, _| {});
        assert_eq!(summary.events_processed, 3);
        assert_eq!(summary.counts["tock"], 3);
    }

    #[test]
    fn cancelled_events_never_fire() {
        let mut eng = Engine::new();
        let keep = eng.schedule(SimTime::from_micros(1), TestEv::Tick(1)).unwrap();
        let drop = eng.schedule(SimTime::from_micros(2), TestEv::Tick(2)).unwrap();
        assert!(eng.cancel(drop));
        assert!(!eng.cancel(drop), "second cancel must report failure");
        let mut seen = Vec::new();
        eng.run_until(SimTime::from_micros(10), |_, _, ev| seen.push(ev));
        assert_eq!(seen, vec![TestEv::Tick(1)]);
        assert!(!eng.cancel(keep), "cancel after firing must report failure");
    }

    #[test]
    fn handler_may_schedule_within_the_horizon() {
        let mut eng = Engine::new();
        eng.schedule(SimTime::from_micros(1), TestEv::Tick(0)).unwrap();
        let mut seen = Vec::new();
        eng.run_until(SimTime::from_micros(5), |eng, at, ev| {
            if let TestEv::Tick(n) = ev {
                seen.push((at.as_micros(), n));
                if n < 3 {
                    eng.schedule(at + SimTime::from_micros(1), TestEv::Tick(n + 1))
                        .unwrap();
                }
            }
        });
        assert_eq!(seen, vec![(1, 0), (2, 1), (3, 2), (4, 3)]);
    }

    #[test]
    fn rng_streams_are_stable_and_independent() {
        let reg = RngRegistry::new(42);
        let mut a1 = reg.stream("traffic/device/1");
        let mut a2 = reg.stream("traffic/device/1");
        let mut b = reg.stream("traffic/device/2");
        let first: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let second: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        let other: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(first, second, "same label must replay the same stream");
        assert_ne!(first, other, "labels must decorrelate streams");
        let reg43 = RngRegistry::new(43);
        let mut c = reg43.stream("traffic/device/1");
        let reseeded: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_ne!(first, reseeded, "seed must decorrelate streams");
    }

    proptest! {
        #[test]
        fn events_fire_in_time_then_insertion_order(
            times in proptest::collection::vec(0u64..1_000, 1..64),
            cancel_mask in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let mut eng = Engine::new();
            let mut handles = Vec::new();
            for (i, &t) in times.iter().enumerate() {
                let h = eng.schedule(SimTime::from_micros(t), TestEv::Tick(i as u32)).unwrap();
                handles.push((h, t, i));
            }
            let mut expected: Vec<(u64, usize)> = Vec::new();
            for &(h, t, i) in &handles {
                if cancel_mask[i % cancel_mask.len()] {
                    eng.cancel(h);
                } else {
                    expected.push((t, i));
                }
            }
            expected.sort();

            let mut seen: Vec<(u64, usize)> = Vec::new();
            eng.run_until(SimTime::from_micros(1_000), |_, at, ev| {
                if let TestEv::Tick(n) = ev {
                    seen.push((at.as_micros(), n as usize));
                }
            });
            prop_assert_eq!(seen, expected);
        }
    }
}
