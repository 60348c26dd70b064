//! Coupled pipeline for the static baseline.
//!
//! All `prefill_workers + decode_workers` GPUs act as combined workers
//! pulling fixed-size batches from one global FIFO queue. A batch is
//! prefilled, then decoded in lockstep until its last member finishes;
//! finished members keep their padded slot. Memory is charged as
//! `members × (longest input + step)`. When the next step would not fit,
//! finished members are released first and then the most recently queued
//! unfinished members are evicted and put back in the queue at their
//! arrival position, to be prefilled again over their whole context.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::time::Instant;

use serde_json::json;

use crate::baselines::{schedule_static, StaticEntry};
use crate::memory::{waste_ratio, Bytes};
use crate::metrics::{Monitor, MonitorEvent, PhaseTimes, ReportContext, RequestRecord, Timing, Utilization};
use crate::workload::Request;

use super::event::{EventKind, EventLog, EventQueue, Payload};
use super::{breach, ScheduledBatch, SimConfig, SimError, SimOutcome};

#[derive(Debug, Clone)]
struct ReqState {
    req: Request,
    prefill_len: u32,
    remaining: u32,
    seg_start: f64,
    phases: PhaseTimes,
    done: bool,
}

#[derive(Debug, Clone, Copy)]
struct Member {
    req: usize,
    input: u32,
    finished: bool,
}

#[derive(Debug, Clone)]
struct Running {
    members: Vec<Member>,
    /// Decode steps started so far.
    step: u32,
    decoding: bool,
}

impl Running {
    fn s_max(&self) -> u32 {
        self.members.iter().map(|m| m.input).max().unwrap_or(0)
    }

    /// Padded tokens held while step `step` runs.
    fn tokens_at(&self, step: u32) -> u64 {
        self.members.len() as u64 * (self.s_max() as u64 + step as u64)
    }
}

struct Coupled<'a> {
    cfg: &'a SimConfig,
    fixed_n: usize,
    safe: Bytes,
    per_token: Bytes,
    reqs: Vec<ReqState>,
    index: HashMap<u64, usize>,
    queue: VecDeque<StaticEntry>,
    workers: Vec<Option<Running>>,
    held: Vec<Bytes>,
    useful_prefill: f64,
    weighted_decode: f64,
    events: EventQueue,
    monitor: Monitor,
    log: EventLog<'a>,
    arrived: usize,
    tick_at: Option<f64>,
    tokens_emitted: u64,
    schedule: Vec<ScheduledBatch>,
    peak: Vec<Bytes>,
    checks: u64,
    last_completion: f64,
}

pub(super) fn run<'a>(
    requests: Vec<Request>,
    cfg: &'a SimConfig,
    fixed_n: usize,
    log: Option<&'a mut dyn Write>,
) -> Result<SimOutcome, SimError> {
    let started = Instant::now();
    let n_workers = cfg.cluster.prefill_workers + cfg.cluster.decode_workers;
    let mut index = HashMap::with_capacity(requests.len());
    let reqs: Vec<ReqState> = requests
        .into_iter()
        .enumerate()
        .map(|(i, req)| {
            index.insert(req.id, i);
            ReqState {
                prefill_len: req.input_len,
                remaining: req.output_len,
                seg_start: req.arrival_time,
                phases: PhaseTimes::default(),
                done: false,
                req,
            }
        })
        .collect();
    let mut sim = Coupled {
        cfg,
        fixed_n,
        safe: cfg.safe_memory(),
        per_token: cfg.model.kv_bytes_per_token(),
        reqs,
        index,
        queue: VecDeque::new(),
        workers: vec![None; n_workers],
        held: vec![0; n_workers],
        useful_prefill: 0.0,
        weighted_decode: 0.0,
        events: EventQueue::new(),
        monitor: Monitor::new(),
        log: EventLog::new(log),
        arrived: 0,
        tick_at: None,
        tokens_emitted: 0,
        schedule: Vec::new(),
        peak: vec![0; n_workers],
        checks: 0,
        last_completion: f64::NEG_INFINITY,
    };
    for (i, r) in sim.reqs.iter().enumerate() {
        sim.events
            .push(r.req.arrival_time, EventKind::Arrival, Payload::Request(i));
    }
    sim.run_loop()?;

    let first_arrival = sim
        .reqs
        .iter()
        .map(|r| r.req.arrival_time)
        .fold(f64::INFINITY, f64::min);
    let window = sim.last_completion - first_arrival;
    let utilization = if window > 0.0 {
        let denom = window * n_workers as f64;
        Utilization {
            prefill: (sim.useful_prefill / denom).min(1.0),
            decode: (sim.weighted_decode / denom).min(1.0),
        }
    } else {
        Utilization::default()
    };
    sim.log.finish()?;
    let report = sim.monitor.finish(ReportContext {
        policy: cfg.policy.label().to_string(),
        accounting: cfg.accounting,
        utilization,
        timing: Some(Timing {
            bucketing_overhead_s: 0.0,
            sim_wall_s: started.elapsed().as_secs_f64(),
        }),
    });
    Ok(SimOutcome {
        report,
        schedule: sim.schedule,
        snapshots: Vec::new(),
        requests: sim.reqs.into_iter().map(|r| r.req).collect(),
        tokens_emitted: sim.tokens_emitted,
        peak_memory: sim.peak,
        safe_memory: sim.safe,
        memory_checks: sim.checks,
    })
}

impl Coupled<'_> {
    fn run_loop(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.events.pop() {
            let now = ev.time;
            match (ev.kind, ev.payload) {
                (EventKind::Arrival, Payload::Request(i)) => {
                    self.arrived += 1;
                    let r = &mut self.reqs[i];
                    r.req.timestamps.enqueue = Some(now);
                    self.queue.push_back(StaticEntry {
                        id: r.req.id,
                        input_len: r.prefill_len,
                    });
                    self.log.write(
                        now,
                        "arrival",
                        Some(r.req.id),
                        None,
                        || json!({"input_len": r.prefill_len}),
                    );
                    let burst_continues = self
                        .events
                        .peek()
                        .is_some_and(|n| n.kind == EventKind::Arrival && n.time == now);
                    if !burst_continues {
                        self.dispatch(now)?;
                    }
                }
                (EventKind::SchedulerTick, _) => {
                    self.tick_at = None;
                    self.log
                        .write(now, "scheduler_tick", None, None, || serde_json::Value::Null);
                    self.dispatch(now)?;
                }
                (EventKind::PrefillDone, Payload::Worker(w)) => self.on_prefill_done(w, now)?,
                (EventKind::DecodeStepDone, Payload::Worker(w)) => self.on_step_done(w, now)?,
                (EventKind::Completion, Payload::RequestOn(i, w)) => self.on_completion(i, w, now)?,
                (kind, payload) => return Err(breach(now, format!("malformed event {kind:?} {payload:?}"))),
            }
            self.check_memory(now)?;
        }
        if let Some(r) = self.reqs.iter().find(|r| !r.done) {
            return Err(breach(
                self.last_completion,
                format!("request {} never finished", r.req.id),
            ));
        }
        Ok(())
    }

    /// The queue is kept in arrival order, so the oldest entry is at the front.
    fn oldest_queued_arrival(&self) -> Option<f64> {
        self.queue
            .front()
            .map(|e| self.reqs[self.index[&e.id]].req.arrival_time)
    }

    fn dispatch(&mut self, now: f64) -> Result<(), SimError> {
        for w in 0..self.workers.len() {
            if self.workers[w].is_some() || self.queue.is_empty() {
                continue;
            }
            let mut flush = self.arrived == self.reqs.len();
            if let (Some(wait), Some(oldest)) = (self.cfg.static_max_wait, self.oldest_queued_arrival()) {
                flush |= now >= oldest + wait;
            }
            let out = schedule_static(&mut self.queue, self.fixed_n, &self.cfg.model, self.safe, flush);
            for rej in out.rejected {
                let i = self.index[&rej.id];
                self.log.write(
                    now,
                    "rejected",
                    Some(rej.id),
                    None,
                    || json!({"reason": rej.to_string()}),
                );
                self.finish(i, now, false)?;
            }
            if let Some(batch) = out.batch {
                let tokens = batch.s_max as u64 * batch.ids.len() as u64;
                let dur = self.cfg.cost.prefill_time(tokens);
                let mut members = Vec::with_capacity(batch.ids.len());
                for &id in &batch.ids {
                    let i = self.index[&id];
                    let r = &mut self.reqs[i];
                    r.phases.queue += now - r.seg_start;
                    r.seg_start = now;
                    r.req.timestamps.prefill_start.get_or_insert(now);
                    members.push(Member {
                        req: i,
                        input: r.prefill_len,
                        finished: false,
                    });
                }
                let useful: u64 = batch.lengths.iter().map(|&s| s as u64).sum();
                self.useful_prefill += self.cfg.cost.prefill_per_token * useful as f64;
                self.held[w] = batch.footprint;
                self.monitor.record_event(
                    now,
                    MonitorEvent::Batch {
                        size: batch.ids.len(),
                        waste: waste_ratio(&batch.lengths).unwrap_or(0.0),
                        halvings: batch.halvings,
                    },
                )?;
                self.log.write(
                    now,
                    "prefill_start",
                    None,
                    Some(w),
                    || json!({"ids": batch.ids, "s_max": batch.s_max, "halvings": batch.halvings, "duration": dur}),
                );
                self.schedule.push(ScheduledBatch {
                    time: now,
                    worker: w,
                    ids: batch.ids,
                    footprint: batch.footprint,
                    pledged: 0,
                });
                self.workers[w] = Some(Running {
                    members,
                    step: 0,
                    decoding: false,
                });
                self.events.push(now + dur, EventKind::PrefillDone, Payload::Worker(w));
            }
        }
        self.arm_timer(now);
        Ok(())
    }

    /// Wake up when the oldest queued request reaches the wait limit.
    fn arm_timer(&mut self, now: f64) {
        let (Some(wait), Some(oldest)) = (self.cfg.static_max_wait, self.oldest_queued_arrival()) else {
            return;
        };
        let at = (oldest + wait).max(now);
        if at == now || self.tick_at.is_some_and(|t| t <= at) {
            return;
        }
        self.tick_at = Some(at);
        self.events.push(at, EventKind::SchedulerTick, Payload::None);
    }

    fn on_prefill_done(&mut self, w: usize, now: f64) -> Result<(), SimError> {
        let run = self.workers[w].as_mut().expect("worker is running a batch");
        for m in &run.members {
            let r = &mut self.reqs[m.req];
            r.phases.prefill += now - r.seg_start;
            r.seg_start = now;
        }
        run.decoding = true;
        self.log
            .write(now, "prefill_done", None, Some(w), || serde_json::Value::Null);
        self.start_step(w, now)
    }

    /// Make room for the next step, then start it.
    fn start_step(&mut self, w: usize, now: f64) -> Result<(), SimError> {
        let budget = self.safe / self.per_token;
        let mut run = self.workers[w].take().expect("worker is running a batch");
        let next = run.step + 1;
        while run.tokens_at(next) > budget {
            let pos = match run.members.iter().rposition(|m| m.finished) {
                Some(p) => p,
                None => {
                    if run.members.len() <= 1 {
                        return Err(breach(now, "a single sequence outgrew worker memory"));
                    }
                    run.members.len() - 1
                }
            };
            let m = run.members.remove(pos);
            if !m.finished {
                let r = &mut self.reqs[m.req];
                r.phases.decode += now - r.seg_start;
                r.seg_start = now;
                r.prefill_len = r.req.input_len + (r.req.output_len - r.remaining);
                let id = r.req.id;
                self.monitor.record_event(now, MonitorEvent::Suspension { id })?;
                self.log
                    .write(now, "suspend", Some(id), Some(w), || json!({"ctx": r.prefill_len}));
                let entry = StaticEntry {
                    id,
                    input_len: r.prefill_len,
                };
                let key = (r.req.arrival_time, id);
                let pos = self.queue.partition_point(|e| {
                    let q = &self.reqs[self.index[&e.id]].req;
                    (q.arrival_time, q.id) < key
                });
                self.queue.insert(pos, entry);
            }
        }
        run.step = next;
        let read_bytes = run.tokens_at(next - 1) * self.per_token;
        let dur = self.cfg.cost.decode_step_time(read_bytes);
        let live: u64 = run
            .members
            .iter()
            .filter(|m| !m.finished)
            .map(|m| m.input as u64 + next as u64 - 1)
            .sum();
        self.weighted_decode += dur * live as f64 / budget.max(1) as f64;
        self.held[w] = run.tokens_at(next) * self.per_token;
        self.workers[w] = Some(run);
        self.events
            .push(now + dur, EventKind::DecodeStepDone, Payload::Worker(w));
        Ok(())
    }

    fn on_step_done(&mut self, w: usize, now: f64) -> Result<(), SimError> {
        let mut run = self.workers[w].take().expect("worker is running a batch");
        for m in run.members.iter_mut().filter(|m| !m.finished) {
            let r = &mut self.reqs[m.req];
            r.remaining -= 1;
            r.req.timestamps.first_token.get_or_insert(now);
            self.tokens_emitted += 1;
            if r.remaining == 0 {
                m.finished = true;
                self.events
                    .push(now, EventKind::Completion, Payload::RequestOn(m.req, w));
            }
        }
        self.log
            .write(now, "decode_step_done", None, Some(w), || json!({"step": run.step}));
        if run.members.iter().all(|m| m.finished) {
            self.held[w] = 0;
            self.dispatch(now)?;
        } else {
            self.workers[w] = Some(run);
            self.start_step(w, now)?;
        }
        // a requeued request may be waiting for an idle worker
        if !self.queue.is_empty() {
            self.dispatch(now)?;
        }
        Ok(())
    }

    fn on_completion(&mut self, i: usize, w: usize, now: f64) -> Result<(), SimError> {
        let r = &mut self.reqs[i];
        r.phases.decode += now - r.seg_start;
        r.req.timestamps.completion = Some(now);
        self.last_completion = self.last_completion.max(now);
        self.log
            .write(now, "completion", Some(r.req.id), Some(w), || serde_json::Value::Null);
        self.finish(i, now, true)
    }

    fn finish(&mut self, i: usize, now: f64, completed: bool) -> Result<(), SimError> {
        let r = &mut self.reqs[i];
        r.done = true;
        if !r.req.timestamps.is_monotone(r.req.arrival_time) {
            return Err(breach(now, format!("request {} has non-monotone timestamps", r.req.id)));
        }
        let rec = RequestRecord {
            id: r.req.id,
            class: r.req.class,
            arrival: r.req.arrival_time,
            output_len: r.req.output_len,
            first_token: r.req.timestamps.first_token,
            completion: r.req.timestamps.completion,
            slo_ttft: r.req.slo_ttft,
            slo_e2e: r.req.slo_e2e,
            phases: r.phases,
        };
        let ev = if completed {
            MonitorEvent::Completion(rec)
        } else {
            MonitorEvent::Rejection(rec)
        };
        self.monitor.record_event(now, ev)?;
        Ok(())
    }

    fn check_memory(&mut self, now: f64) -> Result<(), SimError> {
        for (w, &held) in self.held.iter().enumerate() {
            self.checks += 1;
            self.peak[w] = self.peak[w].max(held);
            if held > self.safe {
                return Err(breach(now, format!("worker {w} holds {held} > safe {}", self.safe)));
            }
        }
        Ok(())
    }
}
