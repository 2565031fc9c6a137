//! Deterministic discrete-event engine.
//!
//! Virtual time is integer milliseconds. Events with equal fire times are
//! processed in ascending sequence number, so a run is a pure function of
//! (config, seed).

pub mod churn;
pub mod latency;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Virtual clock, in milliseconds since scenario start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimClock {
    now: u64,
}

impl SimClock {
    pub fn now(&self) -> u64 {
        self.now
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot schedule at t={at} before current time t={now}")]
    SchedulePast { at: u64, now: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry<T> {
    fire_at: u64,
    seq: u64,
    ev: T,
}

impl<T: Eq> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

impl<T: Eq> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Time-ordered event queue with a monotone clock.
#[derive(Debug)]
pub struct EventQueue<T: Eq> {
    clock: SimClock,
    heap: BinaryHeap<Reverse<Entry<T>>>,
    next_seq: u64,
    processed: u64,
}

impl<T: Eq> Default for EventQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Eq> EventQueue<T> {
    pub fn new() -> Self {
        EventQueue {
            clock: SimClock::default(),
            heap: BinaryHeap::new(),
            next_seq: 0,
            processed: 0,
        }
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    /// Events processed so far.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    /// Enqueue an event. Same-time events fire in schedule order.
    pub fn schedule(&mut self, fire_at: u64, ev: T) -> Result<(), SimError> {
        if fire_at < self.clock.now {
            return Err(SimError::SchedulePast {
                at: fire_at,
                now: self.clock.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { fire_at, seq, ev }));
        Ok(())
    }

    /// Pop the next event due at or before `t_end`, advancing the clock to
    /// its fire time. Returns `None` once nothing is due.
    pub fn pop_due(&mut self, t_end: u64) -> Option<(u64, T)> {
        match self.heap.peek() {
            Some(Reverse(e)) if e.fire_at <= t_end => {
                let Reverse(e) = self.heap.pop().unwrap();
                debug_assert!(e.fire_at >= self.clock.now, "clock would run backward");
                self.clock.now = e.fire_at;
                self.processed += 1;
                Some((e.fire_at, e.ev))
            }
            _ => None,
        }
    }

    /// Advance the clock to `t_end` (used after draining due events).
    pub fn finish_until(&mut self, t_end: u64) {
        if t_end > self.clock.now {
            self.clock.now = t_end;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_time_events_fire_in_schedule_order() {
        let mut q = EventQueue::new();
        q.schedule(100, "a").unwrap();
        q.schedule(50, "b").unwrap();
        q.schedule(100, "c").unwrap();
        let mut seen = Vec::new();
        while let Some((t, e)) = q.pop_due(200) {
            seen.push((t, e));
        }
        assert_eq!(seen, vec![(50, "b"), (100, "a"), (100, "c")]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(10, ()).unwrap();
        assert!(q.pop_due(100).is_some());
        assert_eq!(
            q.schedule(9, ()),
            Err(SimError::SchedulePast { at: 9, now: 10 })
        );
        // Scheduling at exactly `now` is allowed and fires this step.
        q.schedule(10, ()).unwrap();
        assert_eq!(q.pop_due(100), Some((10, ())));
    }

    #[test]
    fn empty_queue_still_advances_clock() {
        let mut q = EventQueue::<()>::new();
        assert!(q.pop_due(500).is_none());
        q.finish_until(500);
        assert_eq!(q.now(), 500);
        assert_eq!(q.processed(), 0);
    }
}
