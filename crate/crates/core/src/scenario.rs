//! Scenario files (TOML).
//!
//! ```toml
//! seed = 7
//! policy = "bucketserve"          # or "continuous", "static:8"
//! memory_accounting = "padded"    # or "exact"
//! offline_policy = "sjf"          # or "ljf"
//! model = "llama2-13b-like"       # or an inline table
//!
//! [cluster]
//! prefill_workers = 1
//! decode_workers = 3
//! [cluster.gpu]
//! total_mem = "40GiB"
//! model_mem = "26GiB"
//!
//! [slo]
//! ttft = 2.0
//!
//! [workload]
//! arrival = { kind = "poisson", rate = 8.0 }
//! input = { kind = "short_normal", mean = 83.0, sd = 40.0 }
//! output = { kind = "constant", value = 64 }
//! horizon = { requests = 1000 }
//! ```
//!
//! A `[workload]` table holds either the synthetic keys above or
//! `trace = "path"` (relative to the scenario file) plus an optional
//! `output` distribution for records without an output length. Unknown keys
//! are rejected everywhere.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::baselines::PolicyKind;
use crate::batch::DispatchPolicy;
use crate::memory::{Bytes, GpuConfig, MemoryAccounting, ModelConfig};
use crate::sim::{ClusterConfig, CostModel, SimConfig, SloConfig, SuspendMode};
use crate::trace::{load_trace, Trace, TraceFormat};
use crate::workload::{gen_synthetic, ArrivalProcess, Horizon, LengthDist, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// A byte count written as an integer or a string such as `"40GiB"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteSize(pub Bytes);

impl ByteSize {
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let split = s.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(s.len());
        let (num, unit) = (s[..split].trim(), s[split..].trim());
        let mult: u64 = match unit {
            "" | "B" => 1,
            "KB" => 1_000,
            "MB" => 1_000_000,
            "GB" => 1_000_000_000,
            "TB" => 1_000_000_000_000,
            "KiB" => 1 << 10,
            "MiB" => 1 << 20,
            "GiB" => 1 << 30,
            "TiB" => 1 << 40,
            _ => return Err(format!("unknown byte unit `{unit}` in `{s}`")),
        };
        if let Ok(n) = num.parse::<u64>() {
            return n
                .checked_mul(mult)
                .map(ByteSize)
                .ok_or_else(|| format!("`{s}` overflows"));
        }
        let x: f64 = num.parse().map_err(|_| format!("bad byte count `{s}`"))?;
        if !(x.is_finite() && x >= 0.0) {
            return Err(format!("bad byte count `{s}`"));
        }
        Ok(ByteSize((x * mult as f64).round() as u64))
    }
}

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(ByteSize(n)),
            Raw::Str(s) => ByteSize::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGpu {
    total_mem: ByteSize,
    model_mem: ByteSize,
    #[serde(default = "default_reserve")]
    reserve_fraction: f64,
}

fn default_reserve() -> f64 {
    GpuConfig::DEFAULT_RESERVE
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCluster {
    prefill_workers: usize,
    decode_workers: usize,
    gpu: RawGpu,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    arrival: Option<ArrivalProcess>,
    input: Option<LengthDist>,
    output: Option<LengthDist>,
    horizon: Option<Horizon>,
    online_fraction: Option<f64>,
    trace: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    seed: u64,
    policy: Option<PolicyKind>,
    tick_interval: Option<f64>,
    memory_accounting: Option<MemoryAccounting>,
    offline_policy: Option<String>,
    online_policy: Option<String>,
    split_threshold: Option<f64>,
    suspend_mode: Option<SuspendMode>,
    static_max_wait: Option<f64>,
    #[serde(default)]
    snapshots: bool,
    model: Option<toml::Value>,
    cluster: Option<RawCluster>,
    cost: Option<CostModel>,
    slo: Option<SloConfig>,
    workload: Option<RawWorkload>,
}

/// Where requests come from.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Synthetic(WorkloadSpec),
    TraceFile {
        path: PathBuf,
        /// Used for records that omit an output length.
        output: LengthDist,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub workload: WorkloadSource,
    pub sim: SimConfig,
}

pub(crate) fn resolve_model(v: toml::Value) -> Result<ModelConfig, ScenarioError> {
    let model = match v {
        toml::Value::String(name) => ModelConfig::preset(&name).ok_or_else(|| {
            invalid(format!(
                "`model`: unknown preset `{name}` (known: {})",
                ModelConfig::PRESETS.join(", ")
            ))
        })?,
        other => other
            .try_into::<ModelConfig>()
            .map_err(|e| invalid(format!("`model`: {}", e.message())))?,
    };
    model.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(model)
}

pub(crate) fn parse_dispatch(key: &str, v: &str, allowed: &[&str]) -> Result<DispatchPolicy, ScenarioError> {
    if !allowed.contains(&v) {
        return Err(invalid(format!(
            "`{key}` must be one of {}, got `{v}`",
            allowed.join(", ")
        )));
    }
    Ok(DispatchPolicy::parse(v).expect("allowed names parse"))
}

fn toml_error(e: toml::de::Error) -> ScenarioError {
    ScenarioError::Parse(e.to_string().trim_end().to_string())
}

impl Scenario {
    /// Parse scenario text. Relative trace paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(toml_error)?;
        let model = resolve_model(raw.model.ok_or_else(|| invalid("missing section `model`"))?)?;
        let rc = raw.cluster.ok_or_else(|| invalid("missing section `cluster`"))?;
        let gpu = GpuConfig {
            total_mem: rc.gpu.total_mem.0,
            model_mem: rc.gpu.model_mem.0,
            reserve_fraction: rc.gpu.reserve_fraction,
        };
        gpu.validate().map_err(|e| invalid(format!("`cluster.gpu`: {e}")))?;
        let cluster = ClusterConfig {
            prefill_workers: rc.prefill_workers,
            decode_workers: rc.decode_workers,
            gpu,
        };

        let mut sim = SimConfig::new(model, cluster);
        if let Some(p) = raw.policy {
            sim.policy = p;
        }
        if let Some(t) = raw.tick_interval {
            sim.tick_interval = t;
        }
        if let Some(a) = raw.memory_accounting {
            sim.accounting = a;
        }
        if let Some(p) = raw.offline_policy {
            sim.offline_policy = parse_dispatch("offline_policy", &p, &["sjf", "ljf", "fcfs"])?;
        }
        if let Some(p) = raw.online_policy {
            sim.online_policy = parse_dispatch("online_policy", &p, &["earliest_arrival", "fcfs"])?;
        }
        if let Some(t) = raw.split_threshold {
            sim.split_threshold = t;
        }
        if let Some(m) = raw.suspend_mode {
            sim.suspend_mode = m;
        }
        sim.static_max_wait = raw.static_max_wait;
        sim.snapshots = raw.snapshots;
        if let Some(c) = raw.cost {
            sim.cost = c;
        }
        if let Some(s) = raw.slo {
            sim.slo = s;
        }
        sim.validate().map_err(|e| invalid(e.to_string()))?;

        let w = raw.workload.ok_or_else(|| invalid("missing section `workload`"))?;
        let workload = match w.trace {
            Some(path) => {
                if w.arrival.is_some() || w.input.is_some() || w.horizon.is_some() || w.online_fraction.is_some() {
                    return Err(invalid(
                        "`workload`: `trace` cannot be combined with arrival, input, horizon or online_fraction",
                    ));
                }
                let output = w.output.unwrap_or(LengthDist::Constant { value: 128 });
                output.validate("workload.output").map_err(|e| invalid(e.to_string()))?;
                WorkloadSource::TraceFile {
                    path: base_dir.join(path),
                    output,
                }
            }
            None => {
                let field = |name: &str| invalid(format!("missing key `workload.{name}`"));
                let spec = WorkloadSpec {
                    arrival: w.arrival.ok_or_else(|| field("arrival"))?,
                    input: w.input.ok_or_else(|| field("input"))?,
                    output: w.output.ok_or_else(|| field("output"))?,
                    horizon: w.horizon.ok_or_else(|| field("horizon"))?,
                    online_fraction: w.online_fraction.unwrap_or(1.0),
                    seed: raw.seed,
                };
                spec.validate().map_err(|e| invalid(format!("workload: {e}")))?;
                WorkloadSource::Synthetic(spec)
            }
        };
        Ok(Scenario {
            seed: raw.seed,
            workload,
            sim,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let WorkloadSource::Synthetic(spec) = &mut self.workload {
            spec.seed = seed;
        }
        self
    }

    /// Rescale the arrival rate. Only synthetic workloads have one.
    pub fn with_load(mut self, rps: f64) -> Result<Self, ScenarioError> {
        if !(rps.is_finite() && rps > 0.0) {
            return Err(invalid(format!("load must be > 0, got {rps}")));
        }
        match &mut self.workload {
            WorkloadSource::Synthetic(spec) => spec.arrival = spec.arrival.with_rate(rps),
            WorkloadSource::TraceFile { .. } => {
                return Err(invalid("a load sweep needs a synthetic workload, not a trace file"))
            }
        }
        Ok(self)
    }

    /// Materialize the request trace.
    pub fn trace(&self) -> Result<Trace, ScenarioError> {
        match &self.workload {
            WorkloadSource::Synthetic(spec) => gen_synthetic(spec).map_err(|e| invalid(e.to_string())),
            WorkloadSource::TraceFile { path, output } => {
                let io = |e: std::io::Error| ScenarioError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                };
                let f = File::open(path).map_err(io)?;
                load_trace(BufReader::new(f), TraceFormat::from_path(path), output, self.seed)
                    .map_err(|e| invalid(format!("{}: {e}", path.display())))
            }
        }
    }
}
