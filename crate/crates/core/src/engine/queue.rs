use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::params::ParamVector;

/// How the PS answers a commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Reply {
    /// No reply (SSP push).
    None,
    /// Held until every worker has committed for the round.
    Barrier,
    /// Held until the sender is within the slack of the slowest worker.
    Pull,
    /// Sent immediately; the worker adopts it while training on.
    Adopt,
    /// Sent immediately; the worker is paused until it lands.
    Resume,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum EventKind {
    StepComplete { worker: usize, gen: u64 },
    CommitArrive { worker: usize, update: ParamVector, reply: Reply },
    ParamsArrive { worker: usize, w: ParamVector, reply: Reply, min_clock: u64, tau: u64 },
    TimerFire { worker: usize, gen: u64 },
    CheckpointTick,
    EvalTick,
}

impl EventKind {
    /// Ticks run after worker and message events that share their timestamp.
    fn class(&self) -> u8 {
        match self {
            EventKind::CheckpointTick | EventKind::EvalTick => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Event {
    fn key(&self) -> (f64, u8, u64) {
        (self.time, self.kind.class(), self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, ca, sa) = self.key();
        let (tb, cb, sb) = other.key();
        tb.total_cmp(&ta).then(cb.cmp(&ca)).then(sb.cmp(&sa))
    }
}

#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time.is_finite());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.heap.len()
    }
}
