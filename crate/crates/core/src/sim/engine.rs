//! Event loop for the disaggregated pipeline.
//!
//! Arrivals are filed into buckets. At every scheduler tick and at the end
//! of every arrival burst the bucket partition is adjusted; idle prefill
//! workers then pull batches (online first). A finished prefill batch ships
//! each request's cache to the decode worker with the most free memory,
//! which runs continuous batching.

use std::collections::HashMap;
use std::io::Write;
use std::time::{Duration, Instant};

use serde_json::json;

use crate::baselines::PolicyKind;
use crate::batch::{select_bucket, BatchController, BatchPlan, DispatchPolicy};
use crate::bucket::{BucketSet, QueuedRequest};
use crate::memory::{expected_waste, Bytes, LengthHistogram, MemoryAccounting};
use crate::metrics::{
    Monitor, MonitorEvent, MonitorSnapshot, PhaseTimes, ReportContext, RequestRecord, StructuralRecord, Timing,
    Utilization,
};
use crate::workload::{Request, TaskClass};

use super::decode::{choose_worker, Admission, DecodeWorker, Waiting};
use super::event::{EventKind, EventLog, EventQueue, Payload};
use super::{breach, ScheduledBatch, SimConfig, SimError, SimOutcome, SuspendMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pending,
    Queued,
    Prefill,
    Transfer,
    Decode,
    Done,
}

#[derive(Debug, Clone)]
struct ReqState {
    req: Request,
    /// Tokens the next prefill must process (grows on recompute).
    prefill_len: u32,
    remaining: u32,
    phase: Phase,
    seg_start: f64,
    phases: PhaseTimes,
    /// Bytes this request holds on its prefill worker until transferred.
    share: Bytes,
}

#[derive(Debug, Clone, Default)]
struct PrefillWorker {
    held: Bytes,
    batch: Option<Vec<usize>>,
    useful_time: f64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    reqs: Vec<ReqState>,
    index: HashMap<u64, usize>,
    buckets: BucketSet,
    controller: BatchController,
    online_policy: DispatchPolicy,
    offline_policy: DispatchPolicy,
    adjust: bool,
    prefill: Vec<PrefillWorker>,
    decode: Vec<DecodeWorker>,
    decode_weighted: Vec<f64>,
    events: EventQueue,
    monitor: Monitor,
    log: EventLog<'a>,
    tick_pending: bool,
    arrived: usize,
    arrived_tokens: u64,
    tokens_emitted: u64,
    in_transfer: usize,
    overhead: Duration,
    schedule: Vec<ScheduledBatch>,
    snapshots: Vec<MonitorSnapshot>,
    recent_arrivals: std::collections::VecDeque<f64>,
    last_batch_latency: Option<f64>,
    peak: Vec<Bytes>,
    checks: u64,
    last_completion: f64,
}

pub(super) fn run<'a>(
    requests: Vec<Request>,
    cfg: &'a SimConfig,
    log: Option<&'a mut dyn Write>,
) -> Result<SimOutcome, SimError> {
    let started = Instant::now();
    let safe = cfg.safe_memory();
    let continuous = cfg.policy == PolicyKind::ContinuousNoBucket;
    let (online_policy, offline_policy) = if continuous {
        (DispatchPolicy::Fcfs, DispatchPolicy::Fcfs)
    } else {
        (cfg.online_policy, cfg.offline_policy)
    };
    let buckets =
        BucketSet::new(cfg.model.max_seq_len, cfg.split_threshold).map_err(|e| SimError::Config(e.to_string()))?;
    let mut index = HashMap::with_capacity(requests.len());
    let reqs: Vec<ReqState> = requests
        .into_iter()
        .enumerate()
        .map(|(i, req)| {
            index.insert(req.id, i);
            ReqState {
                prefill_len: req.input_len,
                remaining: req.output_len,
                phase: Phase::Pending,
                seg_start: req.arrival_time,
                phases: PhaseTimes::default(),
                share: 0,
                req,
            }
        })
        .collect();
    let p = cfg.cluster.prefill_workers;
    let d = cfg.cluster.decode_workers;
    let mut eng = Engine {
        cfg,
        index,
        buckets,
        controller: BatchController::new(cfg.model, cfg.accounting, safe),
        online_policy,
        offline_policy,
        adjust: !continuous,
        prefill: vec![PrefillWorker::default(); p],
        decode: (0..d).map(|_| DecodeWorker::new(&cfg.model, safe)).collect(),
        decode_weighted: vec![0.0; d],
        events: EventQueue::new(),
        monitor: Monitor::new(),
        log: EventLog::new(log),
        tick_pending: false,
        arrived: 0,
        arrived_tokens: 0,
        tokens_emitted: 0,
        in_transfer: 0,
        overhead: Duration::ZERO,
        schedule: Vec::new(),
        snapshots: Vec::new(),
        recent_arrivals: Default::default(),
        last_batch_latency: None,
        peak: vec![0; p + d],
        checks: 0,
        last_completion: f64::NEG_INFINITY,
        reqs,
    };
    for (i, r) in eng.reqs.iter().enumerate() {
        eng.events
            .push(r.req.arrival_time, EventKind::Arrival, Payload::Request(i));
    }
    eng.run_loop()?;

    let first_arrival = eng
        .reqs
        .iter()
        .map(|r| r.req.arrival_time)
        .fold(f64::INFINITY, f64::min);
    let window = eng.last_completion - first_arrival;
    let utilization = if window > 0.0 {
        Utilization {
            prefill: (eng.prefill.iter().map(|w| w.useful_time).sum::<f64>() / (window * p as f64)).min(1.0),
            decode: (eng.decode_weighted.iter().sum::<f64>() / (window * d as f64)).min(1.0),
        }
    } else {
        Utilization::default()
    };
    let Engine {
        monitor,
        log,
        reqs,
        overhead,
        schedule,
        snapshots,
        tokens_emitted,
        peak,
        checks,
        ..
    } = eng;
    log.finish()?;
    let report = monitor.finish(ReportContext {
        policy: cfg.policy.label().to_string(),
        accounting: cfg.accounting,
        utilization,
        timing: Some(Timing {
            bucketing_overhead_s: overhead.as_secs_f64(),
            sim_wall_s: started.elapsed().as_secs_f64(),
        }),
    });
    Ok(SimOutcome {
        report,
        schedule,
        snapshots,
        requests: reqs.into_iter().map(|r| r.req).collect(),
        tokens_emitted,
        peak_memory: peak,
        safe_memory: safe,
        memory_checks: checks,
    })
}

impl Engine<'_> {
    fn run_loop(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.events.pop() {
            let now = ev.time;
            match (ev.kind, ev.payload) {
                (EventKind::Arrival, Payload::Request(i)) => {
                    self.on_arrival(i, now)?;
                    let burst_continues = self
                        .events
                        .peek()
                        .is_some_and(|n| n.kind == EventKind::Arrival && n.time == now);
                    if !burst_continues {
                        self.schedule_pass(now, true)?;
                    }
                }
                (EventKind::SchedulerTick, _) => {
                    self.tick_pending = false;
                    self.log
                        .write(now, "scheduler_tick", None, None, || serde_json::Value::Null);
                    self.schedule_pass(now, true)?;
                    if self.cfg.snapshots {
                        self.snapshot(now);
                    }
                    self.ensure_tick(now);
                }
                (EventKind::PrefillDone, Payload::Worker(w)) => {
                    self.on_prefill_done(w, now);
                    self.schedule_pass(now, false)?;
                }
                (EventKind::TransferDone, Payload::RequestOn(i, w)) => {
                    self.on_transfer_done(i, w, now);
                    self.schedule_pass(now, false)?;
                }
                (EventKind::DecodeStepDone, Payload::Worker(d)) => self.on_step_done(d, now)?,
                (EventKind::Completion, Payload::RequestOn(i, d)) => self.on_completion(i, d, now)?,
                (kind, payload) => return Err(breach(now, format!("malformed event {kind:?} {payload:?}"))),
            }
            self.check_memory(now)?;
        }
        if let Some(r) = self.reqs.iter().find(|r| r.phase != Phase::Done) {
            return Err(breach(
                self.last_completion,
                format!("request {} never finished (phase {:?})", r.req.id, r.phase),
            ));
        }
        Ok(())
    }

    fn queued(&self, i: usize) -> QueuedRequest {
        let r = &self.reqs[i];
        QueuedRequest {
            id: r.req.id,
            input_len: r.prefill_len,
            arrival: r.req.arrival_time,
            class: r.req.class,
        }
    }

    fn enqueue(&mut self, i: usize, now: f64) -> Result<(), SimError> {
        self.enqueue_as(i, now, false)
    }

    /// `requeue` keeps arrival order for work that was already dequeued once.
    fn enqueue_as(&mut self, i: usize, now: f64, requeue: bool) -> Result<(), SimError> {
        let q = self.queued(i);
        let t0 = Instant::now();
        let res = if requeue {
            self.buckets.requeue(q)
        } else {
            self.buckets.assign(q)
        };
        self.overhead += t0.elapsed();
        res.map_err(|e| breach(now, e.to_string()))?;
        let r = &mut self.reqs[i];
        r.phase = Phase::Queued;
        r.seg_start = now;
        self.ensure_tick(now);
        Ok(())
    }

    fn ensure_tick(&mut self, now: f64) {
        if self.tick_pending || self.buckets.total_queued() == 0 {
            return;
        }
        let tick = self.cfg.tick_interval;
        let mut k = (now / tick).floor() + 1.0;
        while k * tick <= now {
            k += 1.0;
        }
        self.events.push(k * tick, EventKind::SchedulerTick, Payload::None);
        self.tick_pending = true;
    }

    fn on_arrival(&mut self, i: usize, now: f64) -> Result<(), SimError> {
        self.arrived += 1;
        self.arrived_tokens += self.reqs[i].prefill_len as u64;
        self.reqs[i].req.timestamps.enqueue = Some(now);
        if self.cfg.snapshots {
            self.recent_arrivals.push_back(now);
        }
        let r = &self.reqs[i].req;
        self.log.write(
            now,
            "arrival",
            Some(r.id),
            None,
            || json!({"input_len": r.input_len, "class": r.class.as_str()}),
        );
        self.enqueue(i, now)
    }

    fn schedule_pass(&mut self, now: f64, adjust: bool) -> Result<(), SimError> {
        if adjust && self.adjust && self.buckets.total_queued() > 0 {
            self.adjust_buckets(now)?;
        }
        self.dispatch(now)
    }

    /// Queued input lengths in arrival order, stopping after the first one
    /// that takes the running sum past `budget`. Each bucket queue is already
    /// in arrival order, so this is a k-way merge of their heads.
    fn arrival_prefix(&self, budget: u64) -> Vec<u32> {
        let mut iters: Vec<_> = self.buckets.buckets().iter().map(|b| b.requests().peekable()).collect();
        let mut out = Vec::new();
        let mut sum = 0u64;
        while sum <= budget {
            let mut best: Option<(usize, &QueuedRequest)> = None;
            for (i, it) in iters.iter_mut().enumerate() {
                if let Some(&r) = it.peek() {
                    let earlier = best.is_none_or(|(_, b)| (r.arrival, r.id) < (b.arrival, b.id));
                    if earlier {
                        best = Some((i, r));
                    }
                }
            }
            let Some((i, r)) = best else { break };
            iters[i].next();
            out.push(r.input_len);
            sum += r.input_len as u64;
        }
        out
    }

    fn adjust_buckets(&mut self, now: f64) -> Result<(), SimError> {
        let queued = self.buckets.total_queued();
        let mean = if queued == 0 {
            self.arrived_tokens as f64 / self.arrived.max(1) as f64
        } else {
            self.buckets.buckets().iter().map(|b| b.tokens()).sum::<u64>() as f64 / queued as f64
        };
        let prefix = self.arrival_prefix(self.controller.token_budget());
        let n_max = self.controller.n_max(&prefix, mean).max(1);
        let t0 = Instant::now();
        let changes = self.buckets.adjust_buckets(n_max);
        self.overhead += t0.elapsed();
        if changes.is_empty() {
            return Ok(());
        }
        let lengths: Vec<u32> = self
            .buckets
            .buckets()
            .iter()
            .flat_map(|b| b.requests().map(|r| r.input_len))
            .collect();
        let waste = LengthHistogram::from_lengths(&lengths)
            .ok()
            .and_then(|h| expected_waste(&h, &self.buckets.ranges()).ok());
        for c in changes {
            self.log.write(
                now,
                "structural",
                None,
                None,
                || json!({"kind": c.kind, "parent_range": c.parent_range, "midpoint": c.midpoint, "n_max": n_max}),
            );
            self.monitor.record_event(
                now,
                MonitorEvent::Structural(StructuralRecord {
                    time: now,
                    kind: c.kind,
                    parent_range: c.parent_range,
                    midpoint: c.midpoint,
                    expected_waste: waste,
                }),
            )?;
        }
        Ok(())
    }

    fn has_queued(&self, class: TaskClass) -> bool {
        self.buckets.buckets().iter().any(|b| b.class_count(class) > 0)
    }

    fn dispatch(&mut self, now: f64) -> Result<(), SimError> {
        for w in 0..self.prefill.len() {
            if self.prefill[w].batch.is_some() {
                continue;
            }
            loop {
                let class = if self.has_queued(TaskClass::Online) {
                    TaskClass::Online
                } else if self.has_queued(TaskClass::Offline) {
                    TaskClass::Offline
                } else {
                    return Ok(());
                };
                let b = select_bucket(&self.buckets, class).expect("class has queued requests");
                let policy = match class {
                    TaskClass::Online => self.online_policy,
                    TaskClass::Offline => self.offline_policy,
                };
                let held = self.prefill[w].held;
                let out = self
                    .controller
                    .form_batch(self.buckets.bucket_mut(b), class, policy, held, now);
                let retry = out.plan.is_none() && !out.rejected.is_empty();
                for rej in out.rejected {
                    let i = self.index[&rej.id];
                    self.log.write(
                        now,
                        "rejected",
                        Some(rej.id),
                        None,
                        || json!({"reason": rej.to_string()}),
                    );
                    self.finish_request(i, now, false)?;
                }
                if let Some(plan) = out.plan {
                    self.start_prefill(w, plan, held, now)?;
                    break;
                }
                if !retry {
                    break;
                }
            }
        }
        Ok(())
    }

    fn start_prefill(&mut self, w: usize, plan: BatchPlan, pledged: Bytes, now: f64) -> Result<(), SimError> {
        let safe = self.controller.safe_memory();
        if plan.footprint + pledged > safe {
            return Err(breach(
                now,
                format!(
                    "batch footprint {} + pledged {pledged} exceeds safe {safe}",
                    plan.footprint
                ),
            ));
        }
        let per_token = self.cfg.model.kv_bytes_per_token();
        let padded = self.cfg.accounting == MemoryAccounting::Padded;
        let tokens = if padded {
            plan.s_max as u64 * plan.len() as u64
        } else {
            plan.token_sum
        };
        let dur = self.cfg.cost.prefill_time(tokens);
        let mut members = Vec::with_capacity(plan.len());
        for (&id, &len) in plan.ids.iter().zip(&plan.lengths) {
            let i = self.index[&id];
            let r = &mut self.reqs[i];
            r.phases.queue += now - r.seg_start;
            r.seg_start = now;
            r.phase = Phase::Prefill;
            r.share = if padded { plan.s_max as u64 } else { len as u64 } * per_token;
            r.req.timestamps.prefill_start.get_or_insert(now);
            members.push(i);
        }
        let worker = &mut self.prefill[w];
        worker.held += plan.footprint;
        worker.useful_time += self.cfg.cost.prefill_per_token * plan.token_sum as f64;
        worker.batch = Some(members);
        self.last_batch_latency = Some(dur);
        self.monitor.record_event(
            now,
            MonitorEvent::Batch {
                size: plan.len(),
                waste: plan.waste_ratio(),
                halvings: 0,
            },
        )?;
        self.log.write(
            now,
            "prefill_start",
            None,
            Some(w),
            || json!({"ids": plan.ids, "s_max": plan.s_max, "footprint": plan.footprint, "bucket": plan.source_bucket, "duration": dur}),
        );
        self.schedule.push(ScheduledBatch {
            time: now,
            worker: w,
            ids: plan.ids,
            footprint: plan.footprint,
            pledged,
        });
        self.events.push(now + dur, EventKind::PrefillDone, Payload::Worker(w));
        Ok(())
    }

    fn on_prefill_done(&mut self, w: usize, now: f64) {
        let members = self.prefill[w].batch.take().unwrap_or_default();
        self.log.write(
            now,
            "prefill_done",
            None,
            Some(w),
            || json!({"batch_size": members.len()}),
        );
        let per_token = self.cfg.model.kv_bytes_per_token();
        for i in members {
            let r = &mut self.reqs[i];
            r.phases.prefill += now - r.seg_start;
            r.seg_start = now;
            r.phase = Phase::Transfer;
            let dur = self.cfg.cost.transfer_time(r.prefill_len as u64 * per_token);
            self.in_transfer += 1;
            self.events
                .push(now + dur, EventKind::TransferDone, Payload::RequestOn(i, w));
        }
    }

    fn on_transfer_done(&mut self, i: usize, w: usize, now: f64) {
        self.in_transfer -= 1;
        let r = &mut self.reqs[i];
        self.prefill[w].held -= r.share;
        r.share = 0;
        r.phases.transfer += now - r.seg_start;
        r.seg_start = now;
        r.phase = Phase::Decode;
        let waiting = Waiting {
            req: i,
            ctx: r.prefill_len,
            remaining: r.remaining,
        };
        let id = r.req.id;
        let d = choose_worker(&self.decode);
        let admission = self.decode[d].admit(waiting);
        self.log.write(
            now,
            "transfer_done",
            Some(id),
            Some(d),
            || json!({"admitted": admission == Admission::Admitted}),
        );
        if !self.decode[d].stepping && !self.decode[d].slots().is_empty() {
            self.start_step(d, now);
        }
    }

    fn start_step(&mut self, d: usize, now: f64) {
        let worker = &mut self.decode[d];
        worker.activate_all();
        let bytes = worker.kv_bytes();
        let dur = self.cfg.cost.decode_step_time(bytes);
        worker.stepping = true;
        self.decode_weighted[d] += dur * worker.used_tokens() as f64 / worker.token_budget().max(1) as f64;
        self.events
            .push(now + dur, EventKind::DecodeStepDone, Payload::Worker(d));
    }

    fn on_step_done(&mut self, d: usize, now: f64) -> Result<(), SimError> {
        let res = self.decode[d].finish_step();
        for &i in &res.emitted {
            let r = &mut self.reqs[i];
            r.remaining -= 1;
            r.req.timestamps.first_token.get_or_insert(now);
            self.tokens_emitted += 1;
        }
        for &i in &res.completed {
            self.events.push(now, EventKind::Completion, Payload::RequestOn(i, d));
        }
        self.log.write(
            now,
            "decode_step_done",
            None,
            Some(d),
            || json!({"emitted": res.emitted.len(), "completed": res.completed.len()}),
        );
        let evicted = self.decode[d].handle_growth_overflow();
        let mut requeued = false;
        for slot in &evicted {
            let id = self.reqs[slot.req].req.id;
            self.monitor.record_event(now, MonitorEvent::Suspension { id })?;
            self.log
                .write(now, "suspend", Some(id), Some(d), || json!({"ctx": slot.ctx}));
            match self.cfg.suspend_mode {
                SuspendMode::Retain => self.decode[d].park_front(Waiting {
                    req: slot.req,
                    ctx: slot.ctx,
                    remaining: slot.remaining,
                }),
                SuspendMode::Recompute => {
                    let r = &mut self.reqs[slot.req];
                    r.phases.decode += now - r.seg_start;
                    r.prefill_len = slot.ctx;
                    self.enqueue_as(slot.req, now, true)?;
                    requeued = true;
                }
            }
        }
        self.decode[d].admit_waiting();
        if self.decode[d].slots().is_empty() {
            self.decode[d].stepping = false;
        } else {
            self.start_step(d, now);
        }
        if requeued {
            self.dispatch(now)?;
        }
        Ok(())
    }

    fn on_completion(&mut self, i: usize, d: usize, now: f64) -> Result<(), SimError> {
        let r = &mut self.reqs[i];
        if r.remaining != 0 {
            return Err(breach(
                now,
                format!("request {} completed with {} tokens left", r.req.id, r.remaining),
            ));
        }
        r.phases.decode += now - r.seg_start;
        r.req.timestamps.completion = Some(now);
        self.last_completion = self.last_completion.max(now);
        self.log
            .write(now, "completion", Some(r.req.id), Some(d), || serde_json::Value::Null);
        self.finish_request(i, now, true)
    }

    fn finish_request(&mut self, i: usize, now: f64, completed: bool) -> Result<(), SimError> {
        let r = &mut self.reqs[i];
        r.phase = Phase::Done;
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
        let safe = self.controller.safe_memory();
        let p = self.prefill.len();
        for (w, worker) in self.prefill.iter().enumerate() {
            self.checks += 1;
            self.peak[w] = self.peak[w].max(worker.held);
            if worker.held > safe {
                return Err(breach(
                    now,
                    format!("prefill worker {w} holds {} > safe {safe}", worker.held),
                ));
            }
        }
        for (d, worker) in self.decode.iter().enumerate() {
            self.checks += 1;
            let used = worker.kv_bytes();
            self.peak[p + d] = self.peak[p + d].max(used);
            if used > worker.safe_memory() {
                return Err(breach(now, format!("decode worker {d} holds {used} > safe {safe}")));
            }
        }
        Ok(())
    }

    fn snapshot(&mut self, now: f64) {
        while self.recent_arrivals.front().is_some_and(|&t| t < now - 1.0) {
            self.recent_arrivals.pop_front();
        }
        let queued: Vec<u32> = self
            .buckets
            .buckets()
            .iter()
            .flat_map(|b| b.requests().map(|r| r.input_len))
            .collect();
        let in_prefill = self.prefill.iter().filter_map(|w| w.batch.as_ref()).map(Vec::len).sum();
        self.snapshots.push(MonitorSnapshot {
            time: now,
            prefill_mem_in_use: self.prefill.iter().map(|w| w.held).collect(),
            decode_mem_in_use: self.decode.iter().map(DecodeWorker::kv_bytes).collect(),
            bucket_queue_lens: self.buckets.buckets().iter().map(|b| b.len()).collect(),
            in_prefill,
            in_transfer: self.in_transfer,
            in_decode: self.decode.iter().map(|w| w.slots().len() + w.waiting().len()).sum(),
            arrival_rate: self.recent_arrivals.len() as f64,
            mean_queued_input_len: (!queued.is_empty())
                .then(|| queued.iter().map(|&s| s as f64).sum::<f64>() / queued.len() as f64),
            recent_batch_latency: self.last_batch_latency,
        });
    }
}
