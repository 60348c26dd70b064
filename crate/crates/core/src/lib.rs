//! Simulator for length-bucketed, memory-safe batching in a
//! prefill/decode-disaggregated LLM serving cluster.
//!
//! The pieces, bottom up:
//!
//! - [`workload`] and [`trace`]: requests, synthetic generators, trace files.
//! - [`memory`]: KV-cache footprint, padding waste, the safe batch bound.
//! - [`bucket`]: adaptive length buckets (assignment, split, merge).
//! - [`batch`]: memory-bounded batch formation and dispatch order.
//! - [`baselines`]: static and single-queue comparison policies.
//! - [`sim`]: the discrete-event engine and its cost model.
//! - [`metrics`]: monitoring, reports, sweeps.
//! - [`scenario`] and [`cli`]: config files and the command-line front end.

pub mod baselines;
pub mod batch;
pub mod bucket;
pub mod cli;
pub mod memory;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod workload;

pub use baselines::PolicyKind;
pub use batch::{BatchController, BatchPlan, DispatchPolicy};
pub use bucket::{BucketSet, ChangeKind, QueuedRequest};
pub use memory::{GpuConfig, LengthHistogram, MemoryAccounting, ModelConfig};
pub use metrics::MetricsReport;
pub use scenario::Scenario;
pub use sim::{run, ClusterConfig, CostModel, SimConfig, SimError, SimOutcome};
pub use trace::Trace;
pub use workload::{Request, TaskClass, WorkloadSpec};
