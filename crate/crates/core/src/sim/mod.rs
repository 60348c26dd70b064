//! Discrete-event simulation of a prefill/decode-disaggregated cluster.
//!
//! [`run`] replays a trace through either the disaggregated pipeline
//! (bucketed or single-queue dispatch) or, for the static baseline, a
//! coupled pipeline in which every worker prefills and decodes its own
//! batch.

pub mod cost;
mod coupled;
pub mod decode;
mod engine;
pub mod event;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::PolicyKind;
use crate::batch::DispatchPolicy;
use crate::bucket::BucketSet;
use crate::memory::{safe_memory, Bytes, GpuConfig, MemoryAccounting, ModelConfig};
use crate::metrics::{MetricsError, MetricsReport, MonitorSnapshot};
use crate::trace::Trace;
use crate::workload::{Request, RequestId};

pub use cost::CostModel;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("invariant breach at t={time}: {message}")]
    InvariantBreach { time: f64, message: String },
    #[error("event log: {0}")]
    Log(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub(crate) fn breach(time: f64, message: impl Into<String>) -> SimError {
    SimError::InvariantBreach {
        time,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub prefill_workers: usize,
    pub decode_workers: usize,
    /// Every worker has this GPU.
    pub gpu: GpuConfig,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.prefill_workers == 0 {
            return Err("`cluster.prefill_workers` must be >= 1".into());
        }
        if self.decode_workers == 0 {
            return Err("`cluster.decode_workers` must be >= 1".into());
        }
        self.gpu.validate().map_err(|e| e.to_string())
    }
}

/// What happens to a decode slot evicted because its cache outgrew memory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuspendMode {
    /// Cache kept off-device; the request resumes later at no cost.
    #[default]
    Retain,
    /// Cache dropped; the request is prefilled again over its full context.
    Recompute,
}

/// Per-request latency targets applied to online requests that carry none.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloConfig {
    pub ttft: Option<f64>,
    pub e2e: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub cost: CostModel,
    pub policy: PolicyKind,
    pub accounting: MemoryAccounting,
    pub online_policy: DispatchPolicy,
    pub offline_policy: DispatchPolicy,
    pub split_threshold: f64,
    pub tick_interval: f64,
    pub suspend_mode: SuspendMode,
    pub slo: SloConfig,
    /// Static baseline only: dispatch a short batch once its oldest request
    /// has waited this long.
    pub static_max_wait: Option<f64>,
    /// Record a [`MonitorSnapshot`] at every scheduler tick.
    pub snapshots: bool,
}

impl SimConfig {
    pub const DEFAULT_TICK: f64 = 0.05;

    pub fn new(model: ModelConfig, cluster: ClusterConfig) -> Self {
        SimConfig {
            model,
            cluster,
            cost: CostModel::default(),
            policy: PolicyKind::BucketServe,
            accounting: MemoryAccounting::Padded,
            online_policy: DispatchPolicy::EarliestArrival,
            offline_policy: DispatchPolicy::Sjf,
            split_threshold: BucketSet::DEFAULT_THRESHOLD,
            tick_interval: Self::DEFAULT_TICK,
            suspend_mode: SuspendMode::Retain,
            slo: SloConfig::default(),
            static_max_wait: None,
            snapshots: false,
        }
    }

    pub fn safe_memory(&self) -> Bytes {
        safe_memory(&self.cluster.gpu)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let cfg = |m: String| SimError::Config(m);
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.cluster.validate().map_err(cfg)?;
        self.cost.validate().map_err(cfg)?;
        if !(self.tick_interval.is_finite() && self.tick_interval > 0.0) {
            return Err(cfg(format!("`tick_interval` must be > 0, got {}", self.tick_interval)));
        }
        if !(0.0..=1.0).contains(&self.split_threshold) {
            return Err(cfg(format!(
                "`split_threshold` must lie in [0, 1], got {}",
                self.split_threshold
            )));
        }
        if let Some(w) = self.static_max_wait {
            if !(w.is_finite() && w >= 0.0) {
                return Err(cfg(format!("`static_max_wait` must be >= 0, got {w}")));
            }
        }
        for (name, v) in [("slo.ttft", self.slo.ttft), ("slo.e2e", self.slo.e2e)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(cfg(format!("`{name}` must be > 0, got {v}")));
                }
            }
        }
        // a decode worker must hold one full-length sequence
        let need = self.model.max_seq_len as u64 * self.model.kv_bytes_per_token();
        if self.safe_memory() < need {
            return Err(cfg(format!(
                "safe memory {} bytes cannot hold one max-length sequence ({need} bytes)",
                self.safe_memory()
            )));
        }
        Ok(())
    }
}

/// One dispatched prefill (or static) batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduledBatch {
    pub time: f64,
    pub worker: usize,
    pub ids: Vec<RequestId>,
    pub footprint: Bytes,
    /// Memory already held on the worker when the batch was formed.
    pub pledged: Bytes,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: MetricsReport,
    /// Batches in dispatch order.
    pub schedule: Vec<ScheduledBatch>,
    pub snapshots: Vec<MonitorSnapshot>,
    /// Requests as simulated (after truncation) with lifecycle timestamps.
    pub requests: Vec<Request>,
    /// Tokens emitted by decode steps.
    pub tokens_emitted: u64,
    /// Highest KV footprint seen on each worker (prefill workers first).
    pub peak_memory: Vec<Bytes>,
    pub safe_memory: Bytes,
    /// Memory-invariant checks performed (one per worker per event).
    pub memory_checks: u64,
}

/// Run the trace to quiescence.
pub fn run(trace: &Trace, cfg: &SimConfig) -> Result<SimOutcome, SimError> {
    run_with_log(trace, cfg, None)
}

/// Run the trace, writing one JSON line per processed event to `log`.
pub fn run_with_log<'a>(
    trace: &Trace,
    cfg: &'a SimConfig,
    log: Option<&'a mut dyn Write>,
) -> Result<SimOutcome, SimError> {
    cfg.validate()?;
    let mut requests = trace.requests().to_vec();
    for r in &mut requests {
        r.truncate_to(cfg.model.max_seq_len);
        if r.class == crate::workload::TaskClass::Online {
            r.slo_ttft = r.slo_ttft.or(cfg.slo.ttft);
            r.slo_e2e = r.slo_e2e.or(cfg.slo.e2e);
        }
    }
    match cfg.policy {
        PolicyKind::StaticBatch { fixed_n } => coupled::run(requests, cfg, fixed_n, log),
        PolicyKind::BucketServe | PolicyKind::ContinuousNoBucket => engine::run(requests, cfg, log),
    }
}
