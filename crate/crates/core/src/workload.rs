//! Request model and synthetic workload generation.
//!
//! Input and output lengths are drawn from parameterized distributions whose
//! defaults follow the summary statistics of short instruction-following
//! prompts (mean ~83 tokens) and long-document workloads (heavy right tail,
//! truncated to the model context). Output lengths are sampled up front but
//! the scheduler never reads them; only the decode simulator consumes them
//! one token at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type RequestId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload configuration: `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("trace parse error on line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("trace I/O error: {0}")]
    Io(String),
}

impl WorkloadError {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        WorkloadError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskClass {
    Online,
    Offline,
}

impl TaskClass {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskClass::Online => "online",
            TaskClass::Offline => "offline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "online" => Some(TaskClass::Online),
            "offline" => Some(TaskClass::Offline),
            _ => None,
        }
    }
}

/// Lifecycle timestamps in simulated seconds. Unset until the simulator
/// reaches the corresponding stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Lifecycle {
    pub enqueue: Option<f64>,
    pub prefill_start: Option<f64>,
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
}

impl Lifecycle {
    /// True when every set timestamp is no earlier than the previous stage
    /// (and the first one no earlier than `arrival`).
    pub fn is_monotone(&self, arrival: f64) -> bool {
        let mut last = arrival;
        for t in [self.enqueue, self.prefill_start, self.first_token, self.completion]
            .into_iter()
            .flatten()
        {
            if t < last {
                return false;
            }
            last = t;
        }
        true
    }
}

/// One inference job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_time: f64,
    pub input_len: u32,
    /// Hidden from the scheduler; revealed token by token during decode.
    pub output_len: u32,
    pub class: TaskClass,
    pub slo_ttft: Option<f64>,
    pub slo_e2e: Option<f64>,
    #[serde(default)]
    pub timestamps: Lifecycle,
}

impl Request {
    pub fn new(id: RequestId, arrival_time: f64, input_len: u32, output_len: u32, class: TaskClass) -> Self {
        Request {
            id,
            arrival_time,
            input_len,
            output_len,
            class,
            slo_ttft: None,
            slo_e2e: None,
            timestamps: Lifecycle::default(),
        }
    }

    /// Fit the request into a model context of `max_len` tokens. The input is
    /// cut to `max_len - 1` so it lands inside the half-open bucket range
    /// `[0, max_len)`, and the output is cut so that the final decode context
    /// never exceeds `max_len`.
    pub fn truncate_to(&mut self, max_len: u32) {
        let max_len = max_len.max(2);
        self.input_len = self.input_len.clamp(1, max_len - 1);
        self.output_len = self.output_len.clamp(1, max_len - self.input_len);
    }
}

/// Token-length distribution used for both prompt and output lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Constant { value: u32 },
    ShortNormal { mean: f64, sd: f64 },
    LongTailLognormal { mu: f64, sigma: f64, cap: u32 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub dist: LengthDist,
}

impl LengthDist {
    /// Short instruction-style prompts, mean 83 tokens.
    pub fn short_default() -> Self {
        LengthDist::ShortNormal { mean: 83.0, sd: 40.0 }
    }

    /// Long-document prompts, heavy right tail truncated at `cap`.
    pub fn long_tail_default(cap: u32) -> Self {
        LengthDist::LongTailLognormal {
            mu: 7.0,
            sigma: 1.0,
            cap,
        }
    }

    /// Mixture of the short and long-tail defaults.
    pub fn mixed_default(long_weight: f64, cap: u32) -> Self {
        LengthDist::Mixture {
            components: vec![
                MixtureComponent {
                    weight: 1.0 - long_weight,
                    dist: Self::short_default(),
                },
                MixtureComponent {
                    weight: long_weight,
                    dist: Self::long_tail_default(cap),
                },
            ],
        }
    }

    pub fn validate(&self, field: &str) -> Result<(), WorkloadError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(WorkloadError::config(
                    format!("{field}.{name}"),
                    format!("must be positive and finite, got {v}"),
                ))
            }
        };
        match self {
            LengthDist::Constant { value } => {
                if *value == 0 {
                    return Err(WorkloadError::config(format!("{field}.value"), "must be >= 1"));
                }
            }
            LengthDist::ShortNormal { mean, sd } => {
                positive("mean", *mean)?;
                positive("sd", *sd)?;
            }
            LengthDist::LongTailLognormal { mu, sigma, cap } => {
                positive("mu", *mu)?;
                positive("sigma", *sigma)?;
                if *cap == 0 {
                    return Err(WorkloadError::config(format!("{field}.cap"), "must be >= 1"));
                }
            }
            LengthDist::Mixture { components } => {
                if components.is_empty() {
                    return Err(WorkloadError::config(
                        format!("{field}.components"),
                        "mixture needs at least one component",
                    ));
                }
                let mut sum = 0.0;
                for (i, c) in components.iter().enumerate() {
                    if !(c.weight.is_finite() && c.weight >= 0.0) {
                        return Err(WorkloadError::config(
                            format!("{field}.components[{i}].weight"),
                            format!("must be non-negative, got {}", c.weight),
                        ));
                    }
                    sum += c.weight;
                    c.dist.validate(&format!("{field}.components[{i}].dist"))?;
                }
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(WorkloadError::config(
                        format!("{field}.components"),
                        format!("mixture weights must sum to 1, got {sum}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Draw one length, always >= 1. Callers validate first; an invalid
    /// distribution here is a programming error.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            LengthDist::Constant { value } => (*value).max(1),
            LengthDist::ShortNormal { mean, sd } => {
                let v = Normal::new(*mean, *sd).expect("validated normal").sample(rng);
                round_clamp(v, 1, u32::MAX)
            }
            LengthDist::LongTailLognormal { mu, sigma, cap } => {
                let v = LogNormal::new(*mu, *sigma).expect("validated lognormal").sample(rng);
                round_clamp(v, 1, *cap)
            }
            LengthDist::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for c in components {
                    acc += c.weight;
                    if u < acc {
                        return c.dist.sample(rng);
                    }
                }
                components.last().expect("non-empty mixture").dist.sample(rng)
            }
        }
    }
}

fn round_clamp(v: f64, lo: u32, hi: u32) -> u32 {
    if !v.is_finite() {
        return if v > 0.0 { hi } else { lo };
    }
    v.round().clamp(lo as f64, hi as f64) as u32
}

/// Draw an output length. Kept separate from prompt sampling so the decode
/// side can be reasoned about on its own.
pub fn sample_output_len<R: Rng + ?Sized>(dist: &LengthDist, rng: &mut R) -> u32 {
    dist.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    Poisson { rate: f64 },
    FixedInterval { gap: f64 },
}

impl ArrivalProcess {
    pub fn rate(&self) -> f64 {
        match self {
            ArrivalProcess::Poisson { rate } => *rate,
            ArrivalProcess::FixedInterval { gap } => 1.0 / gap,
        }
    }

    /// Same process shape, rescaled to `rate` requests per second.
    pub fn with_rate(&self, rate: f64) -> Self {
        match self {
            ArrivalProcess::Poisson { .. } => ArrivalProcess::Poisson { rate },
            ArrivalProcess::FixedInterval { .. } => ArrivalProcess::FixedInterval { gap: 1.0 / rate },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Horizon {
    Requests(usize),
    Duration(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub arrival: ArrivalProcess,
    pub input: LengthDist,
    pub output: LengthDist,
    pub horizon: Horizon,
    #[serde(default = "default_online_fraction")]
    pub online_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_online_fraction() -> f64 {
    1.0
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self.arrival {
            ArrivalProcess::Poisson { rate } if !(rate.is_finite() && rate > 0.0) => {
                return Err(WorkloadError::config(
                    "arrival.rate",
                    format!("must be positive, got {rate}"),
                ))
            }
            ArrivalProcess::FixedInterval { gap } if !(gap.is_finite() && gap > 0.0) => {
                return Err(WorkloadError::config(
                    "arrival.gap",
                    format!("must be positive, got {gap}"),
                ))
            }
            _ => {}
        }
        self.input.validate("input")?;
        self.output.validate("output")?;
        match self.horizon {
            Horizon::Requests(0) => return Err(WorkloadError::config("horizon.requests", "must be >= 1")),
            Horizon::Duration(d) if !(d.is_finite() && d > 0.0) => {
                return Err(WorkloadError::config(
                    "horizon.duration",
                    format!("must be positive, got {d}"),
                ))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.online_fraction) {
            return Err(WorkloadError::config(
                "online_fraction",
                format!("must lie in [0, 1], got {}", self.online_fraction),
            ));
        }
        Ok(())
    }
}

/// Generate a synthetic trace. Deterministic for a fixed `WorkloadSpec` (seed included).
pub fn gen_synthetic(spec: &WorkloadSpec) -> Result<crate::trace::Trace, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut requests = Vec::new();
    let mut t = 0.0_f64;
    let mut id: RequestId = 0;
    loop {
        if let Horizon::Requests(n) = spec.horizon {
            if requests.len() >= n {
                break;
            }
        }
        // FixedInterval starts at 0; Poisson starts one inter-arrival in.
        let arrival = match spec.arrival {
            ArrivalProcess::Poisson { rate } => {
                t += Exp::new(rate).expect("validated rate").sample(&mut rng);
                t
            }
            ArrivalProcess::FixedInterval { gap } => id as f64 * gap,
        };
        if let Horizon::Duration(d) = spec.horizon {
            if arrival >= d {
                break;
            }
        }
        let input_len = spec.input.sample(&mut rng);
        let output_len = sample_output_len(&spec.output, &mut rng);
        let class = if rng.random::<f64>() < spec.online_fraction {
            TaskClass::Online
        } else {
            TaskClass::Offline
        };
        requests.push(Request::new(id, arrival, input_len, output_len, class));
        id += 1;
    }
    Ok(crate::trace::Trace::from_sorted_unchecked(requests))
}
