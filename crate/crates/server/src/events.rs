//! Sequence-numbered event log with a bounded buffer.
//!
//! The writer never waits on readers: once the buffer is full the oldest
//! event is dropped, and a reader asking for anything older is told there
//! is a gap so it can refetch `/state`.

use std::collections::VecDeque;

use serde::Serialize;
use serde_json::Value;
use tokio::sync::watch;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineEvent {
    pub seq: u64,
    pub sim_time: f64,
    pub kind: String,
    pub payload: Value,
}

/// Events after a given sequence number.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventBatch {
    pub events: Vec<EngineEvent>,
    /// True when events between the requested position and the first
    /// returned one were dropped.
    pub gap: bool,
    pub last_seq: u64,
}

#[derive(Debug)]
pub struct EventLog {
    buf: VecDeque<EngineEvent>,
    capacity: usize,
    last_seq: u64,
    tx: watch::Sender<u64>,
}

impl EventLog {
    pub fn new(capacity: usize) -> Self {
        Self {
            buf: VecDeque::new(),
            capacity: capacity.max(1),
            last_seq: 0,
            tx: watch::Sender::new(0),
        }
    }

    pub fn push(&mut self, sim_time: f64, kind: impl Into<String>, payload: Value) -> u64 {
        self.last_seq += 1;
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(EngineEvent {
            seq: self.last_seq,
            sim_time,
            kind: kind.into(),
            payload,
        });
        self.tx.send_replace(self.last_seq);
        self.last_seq
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn since(&self, seq: u64) -> EventBatch {
        let oldest = self.buf.front().map_or(self.last_seq + 1, |e| e.seq);
        EventBatch {
            events: self.buf.iter().filter(|e| e.seq > seq).cloned().collect(),
            gap: seq + 1 < oldest && seq < self.last_seq,
            last_seq: self.last_seq,
        }
    }

    /// Receiver that changes whenever an event is pushed.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.tx.subscribe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sequence_numbers_start_at_one_and_increase() {
        let mut log = EventLog::new(8);
        assert_eq!(log.push(0.0, "A", json!({})), 1);
        assert_eq!(log.push(0.5, "B", json!({})), 2);
        let b = log.since(0);
        assert_eq!(b.events.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2]);
        assert!(!b.gap);
        assert!(log.since(2).events.is_empty());
    }

    #[test]
    fn overflow_drops_oldest_and_flags_gap() {
        let mut log = EventLog::new(3);
        for k in 0..5 {
            log.push(k as f64, "E", json!({ "k": k }));
        }
        let b = log.since(0);
        assert!(b.gap);
        assert_eq!(b.events.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![3, 4, 5]);
        assert!(!log.since(2).gap);
        assert!(!log.since(5).gap);
    }

    #[test]
    fn push_notifies_subscribers() {
        let mut log = EventLog::new(2);
        let rx = log.subscribe();
        log.push(0.0, "E", json!(null));
        assert!(rx.has_changed().unwrap());
        assert_eq!(*rx.borrow(), 1);
    }
}
