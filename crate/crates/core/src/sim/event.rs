//! Deterministic event queue and the optional JSON-lines event log.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::Serialize;

/// Event kinds in tie-break order: at equal times, arrivals are handled
/// first and completions last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    SchedulerTick,
    PrefillDone,
    TransferDone,
    DecodeStepDone,
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    /// Index into the trace.
    Request(usize),
    Worker(usize),
    /// Request index and the worker it concerns.
    RequestOn(usize, usize),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub seq: u64,
    pub payload: Payload,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.cmp(&self.kind))
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<SimEvent>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, kind: EventKind, payload: Payload) {
        debug_assert!(time.is_finite());
        self.heap.push(SimEvent {
            time,
            kind,
            seq: self.next_seq,
            payload,
        });
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop()
    }

    pub fn peek(&self) -> Option<&SimEvent> {
        self.heap.peek()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    t: f64,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    request_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    worker: Option<usize>,
    detail: serde_json::Value,
}

/// Writes one JSON object per line. Write failures are remembered and
/// reported once at the end of the run.
pub struct EventLog<'w> {
    out: Option<&'w mut dyn Write>,
    error: Option<std::io::Error>,
}

impl<'w> EventLog<'w> {
    pub fn new(out: Option<&'w mut dyn Write>) -> Self {
        EventLog { out, error: None }
    }

    pub fn enabled(&self) -> bool {
        self.out.is_some()
    }

    /// `detail` is only evaluated when logging is on.
    pub fn write(
        &mut self,
        t: f64,
        kind: &str,
        request_id: Option<u64>,
        worker: Option<usize>,
        detail: impl FnOnce() -> serde_json::Value,
    ) {
        let Some(out) = self.out.as_mut() else { return };
        if self.error.is_some() {
            return;
        }
        let line = LogLine {
            t,
            kind,
            request_id,
            worker,
            detail: detail(),
        };
        let res = serde_json::to_writer(&mut *out, &line)
            .map_err(std::io::Error::other)
            .and_then(|_| out.write_all(b"\n"));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_time_then_kind_then_seq() {
        let mut q = EventQueue::new();
        q.push(1.0, EventKind::Completion, Payload::None);
        q.push(1.0, EventKind::Arrival, Payload::Request(1));
        q.push(0.5, EventKind::DecodeStepDone, Payload::Worker(0));
        q.push(1.0, EventKind::Arrival, Payload::Request(2));
        let got: Vec<(f64, EventKind, Payload)> = std::iter::from_fn(|| q.pop())
            .map(|e| (e.time, e.kind, e.payload))
            .collect();
        assert_eq!(
            got,
            vec![
                (0.5, EventKind::DecodeStepDone, Payload::Worker(0)),
                (1.0, EventKind::Arrival, Payload::Request(1)),
                (1.0, EventKind::Arrival, Payload::Request(2)),
                (1.0, EventKind::Completion, Payload::None),
            ]
        );
    }

    #[test]
    fn log_lines_are_json() {
        let mut buf = Vec::new();
        {
            let mut log = EventLog::new(Some(&mut buf));
            log.write(0.25, "arrival", Some(3), None, || serde_json::json!({"input_len": 10}));
            log.write(0.5, "scheduler_tick", None, None, || serde_json::Value::Null);
            log.finish().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["request_id"], 3);
        assert!(lines[1].get("request_id").is_none());
    }
}
