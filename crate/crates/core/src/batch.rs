//! Memory-bounded batch formation over bucket queues.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bucket::{Bucket, BucketSet, QueuedRequest};
use crate::memory::{max_safe_batch, token_budget_for, waste_ratio, Bytes, MemoryAccounting, ModelConfig};
use crate::workload::{RequestId, TaskClass};

/// Order in which a bucket queue is drained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchPolicy {
    Sjf,
    Ljf,
    EarliestArrival,
    Fcfs,
}

impl DispatchPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sjf" => Some(DispatchPolicy::Sjf),
            "ljf" => Some(DispatchPolicy::Ljf),
            "earliest_arrival" => Some(DispatchPolicy::EarliestArrival),
            "fcfs" => Some(DispatchPolicy::Fcfs),
            _ => None,
        }
    }
}

/// Sort `requests` for dispatch. Length ties and arrival ties fall back to
/// arrival time then id, so the order is total.
pub fn order_requests(requests: &mut [QueuedRequest], policy: DispatchPolicy) {
    let by_arrival = |a: &QueuedRequest, b: &QueuedRequest| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id));
    match policy {
        DispatchPolicy::Sjf => requests.sort_by(|a, b| a.input_len.cmp(&b.input_len).then_with(|| by_arrival(a, b))),
        DispatchPolicy::Ljf => requests.sort_by(|a, b| b.input_len.cmp(&a.input_len).then_with(|| by_arrival(a, b))),
        DispatchPolicy::EarliestArrival | DispatchPolicy::Fcfs => requests.sort_by(by_arrival),
    }
}

/// Pick the bucket to serve next for `class`.
///
/// Online: the bucket holding the oldest waiting online request.
/// Offline: the bucket with the most queued offline tokens (lower index on
/// ties).
pub fn select_bucket(set: &BucketSet, class: TaskClass) -> Option<usize> {
    match class {
        TaskClass::Online => set
            .buckets()
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.oldest(TaskClass::Online).map(|r| (i, r)))
            .min_by(|(_, a), (_, b)| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)))
            .map(|(i, _)| i),
        TaskClass::Offline => {
            let mut best: Option<(usize, u64)> = None;
            for (i, b) in set.buckets().iter().enumerate() {
                if b.class_count(TaskClass::Offline) == 0 {
                    continue;
                }
                let mass = b.class_tokens(TaskClass::Offline);
                if best.is_none_or(|(_, m)| mass > m) {
                    best = Some((i, mass));
                }
            }
            best.map(|(i, _)| i)
        }
    }
}

/// A batch ready for prefill.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchPlan {
    pub ids: Vec<RequestId>,
    pub lengths: Vec<u32>,
    pub class: TaskClass,
    pub s_max: u32,
    pub token_sum: u64,
    pub footprint: Bytes,
    pub created_at: f64,
    pub source_bucket: (u32, u32),
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn waste_ratio(&self) -> f64 {
        waste_ratio(&self.lengths).unwrap_or(0.0)
    }
}

/// A request that cannot run even alone on an empty worker.
#[derive(Debug, Clone, Copy, Error, PartialEq)]
#[error("request {id} needs {footprint} bytes of KV cache but only {safe} are usable")]
pub struct OversizeError {
    pub id: RequestId,
    pub input_len: u32,
    pub footprint: Bytes,
    pub safe: Bytes,
}

/// What one `form_batch` call produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FormOutcome {
    pub plan: Option<BatchPlan>,
    /// Requests dropped because they can never fit.
    pub rejected: Vec<OversizeError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchController {
    model: ModelConfig,
    accounting: MemoryAccounting,
    safe_memory: Bytes,
    token_budget: u64,
}

impl BatchController {
    pub fn new(model: ModelConfig, accounting: MemoryAccounting, safe_memory: Bytes) -> Self {
        BatchController {
            model,
            accounting,
            safe_memory,
            token_budget: token_budget_for(&model, safe_memory),
        }
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn accounting(&self) -> MemoryAccounting {
        self.accounting
    }

    pub fn safe_memory(&self) -> Bytes {
        self.safe_memory
    }

    pub fn token_budget(&self) -> u64 {
        self.token_budget
    }

    /// Install a new safe-memory figure and return the new token budget.
    pub fn on_memory_change(&mut self, new_safe: Bytes) -> u64 {
        self.safe_memory = new_safe;
        self.token_budget = token_budget_for(&self.model, new_safe);
        self.token_budget
    }

    /// Batch-size bound for the bucketing pass: how many of `lengths`
    /// (queued inputs in arrival order) fit in the token budget. When all of
    /// them fit, the leftover budget is converted to further requests at
    /// `mean_len` each, so a backlog that leaves room in a batch reads as
    /// under-filled.
    pub fn n_max(&self, lengths: &[u32], mean_len: f64) -> usize {
        let n = max_safe_batch(lengths, self.token_budget);
        if n < lengths.len() {
            return n;
        }
        let used: u64 = lengths.iter().map(|&s| s as u64).sum();
        let spare = self.token_budget - used;
        let extra = if mean_len >= 1.0 {
            (spare as f64 / mean_len).floor() as usize
        } else {
            0
        };
        n + extra
    }

    /// Draw the next `class` batch from `bucket`.
    ///
    /// The class's queue is ordered by `policy` and the longest prefix whose
    /// footprint fits in `safe_memory − pledged` is removed and returned.
    /// Requests that exceed `safe_memory` on their own are removed and
    /// reported. If the first request does not fit the headroom, nothing
    /// else is removed.
    pub fn form_batch(
        &self,
        bucket: &mut Bucket,
        class: TaskClass,
        policy: DispatchPolicy,
        pledged: Bytes,
        now: f64,
    ) -> FormOutcome {
        let mut outcome = FormOutcome::default();
        let per_token = self.model.kv_bytes_per_token();
        let oversize: Vec<RequestId> = bucket
            .requests()
            .filter(|r| r.class == class && r.input_len as u64 * per_token > self.safe_memory)
            .map(|r| r.id)
            .collect();
        if !oversize.is_empty() {
            for r in bucket.remove_ids(&oversize) {
                outcome.rejected.push(OversizeError {
                    id: r.id,
                    input_len: r.input_len,
                    footprint: r.input_len as u64 * per_token,
                    safe: self.safe_memory,
                });
            }
        }

        let headroom = self.safe_memory.saturating_sub(pledged);
        let mut queue: Vec<QueuedRequest> = bucket.requests().filter(|r| r.class == class).copied().collect();
        if queue.is_empty() {
            return outcome;
        }
        order_requests(&mut queue, policy);

        let mut s_max = 0u32;
        let mut token_sum = 0u64;
        let mut take = 0usize;
        let mut footprint = 0;
        for (i, r) in queue.iter().enumerate() {
            let next_max = s_max.max(r.input_len);
            let next_sum = token_sum + r.input_len as u64;
            let fp = match self.accounting {
                MemoryAccounting::Padded => next_max as u64 * (i as u64 + 1) * per_token,
                MemoryAccounting::Exact => next_sum * per_token,
            };
            if fp > headroom {
                break;
            }
            s_max = next_max;
            token_sum = next_sum;
            footprint = fp;
            take = i + 1;
        }
        if take == 0 {
            return outcome;
        }
        let ids: Vec<RequestId> = queue[..take].iter().map(|r| r.id).collect();
        let taken = bucket.remove_ids(&ids);
        outcome.plan = Some(BatchPlan {
            ids,
            lengths: taken.iter().map(|r| r.input_len).collect(),
            class,
            s_max,
            token_sum,
            footprint,
            created_at: now,
            source_bucket: bucket.range(),
        });
        outcome
    }
}
