//! Discrete-event kernel: simulation time and the future event set.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation time in integer microseconds.
///
/// Also used for durations (propagation delays, waiting periods). Arithmetic
/// is checked; overflowing an instant is a bug, not a wrap-around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
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

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn checked_add(self, d: SimTime) -> Option<SimTime> {
        self.0.checked_add(d.0).map(SimTime)
    }

    pub fn saturating_add(self, d: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(d.0))
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: SimTime) -> SimTime {
        self.checked_add(rhs).expect("SimTime overflow")
    }
}

impl std::fmt::Display for SimTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Identifier for a scheduled event, assigned from a per-queue monotone counter.
pub type EventId = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("cannot schedule event at {requested} before current time {now}")]
    SchedulingInPast { requested: SimTime, now: SimTime },
}

/// A scheduled event carrying an opaque payload.
#[derive(Debug, Clone)]
pub struct Event<P> {
    pub id: EventId,
    pub time: SimTime,
    pub owner: String,
    pub payload: P,
}

struct HeapEntry<P> {
    event: Event<P>,
}

impl<P> PartialEq for HeapEntry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.event.id == other.event.id
    }
}

impl<P> Eq for HeapEntry<P> {}

impl<P> PartialOrd for HeapEntry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for HeapEntry<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Invert (time, id) so the BinaryHeap pops the earliest event first,
        // with FIFO order among events scheduled for the same time.
        let lhs = (self.event.time, self.event.id);
        let rhs = (other.event.time, other.event.id);
        rhs.cmp(&lhs)
    }
}

/// Future event set ordered by (time, insertion id).
///
/// Cancellation is lazy: cancelled ids are tombstoned and skipped on pop.
pub struct EventQueue<P> {
    heap: BinaryHeap<HeapEntry<P>>,
    cancelled: HashSet<EventId>,
    live: usize,
    next_id: EventId,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            live: 0,
            next_id: 0,
        }
    }

    /// Schedules a payload at `time`, which must not lie before `now`.
    pub fn schedule(
        &mut self,
        now: SimTime,
        time: SimTime,
        owner: impl Into<String>,
        payload: P,
    ) -> Result<EventId, KernelError> {
        if time < now {
            return Err(KernelError::SchedulingInPast {
                requested: time,
                now,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.heap.push(HeapEntry {
            event: Event {
                id,
                time,
                owner: owner.into(),
                payload,
            },
        });
        self.live += 1;
        Ok(id)
    }

    /// Removes and returns the earliest live event.
    pub fn pop_next(&mut self) -> Option<Event<P>> {
        while let Some(entry) = self.heap.pop() {
            if self.cancelled.remove(&entry.event.id) {
                continue;
            }
            self.live -= 1;
            return Some(entry.event);
        }
        None
    }

    /// Cancels a pending event. Returns false if the id is unknown or already
    /// popped or cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id >= self.next_id || self.cancelled.contains(&id) {
            return false;
        }
        // The heap is not indexable; confirm the event is still pending by
        // scanning. Queues here stay small enough that this never matters.
        if !self.heap.iter().any(|e| e.event.id == id) {
            return false;
        }
        self.cancelled.insert(id);
        self.live -= 1;
        true
    }

    /// Time of the earliest live event, if any.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        while let Some(entry) = self.heap.peek() {
            if self.cancelled.contains(&entry.event.id) {
                let entry = self.heap.pop().unwrap();
                self.cancelled.remove(&entry.event.id);
                continue;
            }
            return Some(entry.event.time);
        }
        None
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }
}
