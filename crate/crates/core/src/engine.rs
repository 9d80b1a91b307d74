//! Discrete-event kernel: a time-ordered queue, the simulated clock and
//! named random streams.
//!
//! Events are totally ordered by `(time, seq)`, so two events scheduled for
//! the same instant pop in insertion order. The kernel is single threaded;
//! independent simulations share nothing and can run side by side.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn from_ns(ns: f64) -> SimTime {
        debug_assert!(ns.is_finite() && ns >= 0.0, "invalid time {ns}");
        SimTime(ns)
    }

    pub fn ns(self) -> f64 {
        self.0
    }

    pub fn max(self, other: SimTime) -> SimTime {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: f64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = f64;
    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("event scheduled at {at} but the clock already reads {now}")]
    PastEvent { at: SimTime, now: SimTime },
}

struct Scheduled<E> {
    time: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .0
            .total_cmp(&self.time.0)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue of events keyed by `(time, seq)`.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    now: SimTime,
    next_seq: u64,
    popped: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            popped: 0,
        }
    }

    /// Time of the most recently popped event.
    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Enqueues `event` at `time`. Scheduling before `now` is a model bug and
    /// is reported as an error rather than silently reordered.
    pub fn schedule(&mut self, time: SimTime, event: E) -> Result<u64, EngineError> {
        if time < self.now {
            return Err(EngineError::PastEvent { at: time, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, seq, event });
        Ok(seq)
    }

    /// Pops the earliest event and advances the clock. `None` once exhausted.
    pub fn pop_next(&mut self) -> Option<(SimTime, E)> {
        let item = self.heap.pop()?;
        self.now = item.time;
        self.popped += 1;
        Some((item.time, item.event))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn scheduled_count(&self) -> u64 {
        self.next_seq
    }

    pub fn popped_count(&self) -> u64 {
        self.popped
    }
}

/// Independent stochastic sources. Each gets its own ChaCha stream so that
/// changing how one source draws leaves the others untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    EprGen,
    CircuitGen,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::EprGen => 1,
            Stream::CircuitGen => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn stream(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.id());
        rng
    }
}

/// Inverse-CDF of the exponential distribution: `-mean * ln(u)`, `u` in (0, 1].
pub fn exponential_from_uniform(mean: f64, u: f64) -> f64 {
    -mean * u.ln()
}

/// One exponential draw with the given mean.
pub fn sample_exponential<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    assert!(mean > 0.0, "exponential mean must be positive");
    // random::<f64>() is in [0, 1); flip it so ln never sees zero
    let u = 1.0 - rng.random::<f64>();
    exponential_from_uniform(mean, u)
}
