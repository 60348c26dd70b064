//! KV-cache memory accounting, padding waste, and the safe batch bound.
//!
//! Byte quantities are exact integers; ratios are `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Bytes = u64;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("invalid model config: `{field}`: {message}")]
    InvalidModel { field: &'static str, message: String },
    #[error("invalid gpu config: `{field}`: {message}")]
    InvalidGpu { field: &'static str, message: String },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    LengthExceedsMax { len: u32, max: u32 },
    #[error("waste ratio needs a non-empty batch of lengths >= 1")]
    EmptyBatch,
    #[error("histogram: {0}")]
    Histogram(String),
    #[error("bucket partition leaves [{from}, {to}) uncovered")]
    Gap { from: u32, to: u32 },
    #[error("bucket partition overlaps at [{from}, {to})")]
    Overlap { from: u32, to: u32 },
}

/// Transformer shape parameters that determine KV-cache size per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: u32,
    pub heads: u32,
    pub head_dim: u32,
    pub bytes_per_elem: u32,
    pub max_seq_len: u32,
}

impl ModelConfig {
    /// Named shape presets. These are approximations of public model
    /// architectures for simulation, not measured data.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            // 40 layers, 40 heads x 128 = 5120 hidden, 4k context, fp16.
            "llama2-13b-like" => Some(ModelConfig {
                layers: 40,
                heads: 40,
                head_dim: 128,
                bytes_per_elem: 2,
                max_seq_len: 4096,
            }),
            // Same hidden shape, 2k context.
            "opt-13b-like" => Some(ModelConfig {
                layers: 40,
                heads: 40,
                head_dim: 128,
                bytes_per_elem: 2,
                max_seq_len: 2048,
            }),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 2] = ["llama2-13b-like", "opt-13b-like"];

    pub fn validate(&self) -> Result<(), MemoryError> {
        let check = |field: &'static str, v: u32| {
            if v >= 1 {
                Ok(())
            } else {
                Err(MemoryError::InvalidModel {
                    field,
                    message: "must be >= 1".into(),
                })
            }
        };
        check("layers", self.layers)?;
        check("heads", self.heads)?;
        check("head_dim", self.head_dim)?;
        check("max_seq_len", self.max_seq_len)?;
        if !matches!(self.bytes_per_elem, 1 | 2 | 4) {
            return Err(MemoryError::InvalidModel {
                field: "bytes_per_elem",
                message: format!("must be 1, 2 or 4, got {}", self.bytes_per_elem),
            });
        }
        Ok(())
    }

    /// Bytes of K and V for one token across all layers: `2·L·H·D·B`.
    pub fn kv_bytes_per_token(&self) -> Bytes {
        2 * self.layers as u64 * self.heads as u64 * self.head_dim as u64 * self.bytes_per_elem as u64
    }
}

/// Per-GPU memory. `model_mem` covers weights and activation scratch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuConfig {
    pub total_mem: Bytes,
    pub model_mem: Bytes,
    pub reserve_fraction: f64,
}

impl GpuConfig {
    pub const DEFAULT_RESERVE: f64 = 0.10;

    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.model_mem > self.total_mem {
            return Err(MemoryError::InvalidGpu {
                field: "model_mem",
                message: format!("{} exceeds total_mem {}", self.model_mem, self.total_mem),
            });
        }
        if !(self.reserve_fraction.is_finite() && (0.0..1.0).contains(&self.reserve_fraction)) {
            return Err(MemoryError::InvalidGpu {
                field: "reserve_fraction",
                message: format!("must lie in [0, 1), got {}", self.reserve_fraction),
            });
        }
        Ok(())
    }

    pub fn remaining(&self) -> Bytes {
        self.total_mem.saturating_sub(self.model_mem)
    }
}

/// Which KV footprint the admission check charges a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryAccounting {
    /// Every member charged at the batch's longest input.
    #[default]
    Padded,
    /// Every member charged at its own input length.
    Exact,
}

impl MemoryAccounting {
    pub fn footprint(self, model: &ModelConfig, lengths: &[u32]) -> Bytes {
        let per_token = model.kv_bytes_per_token();
        match self {
            MemoryAccounting::Padded => {
                let s_max = lengths.iter().copied().max().unwrap_or(0) as u64;
                per_token * s_max * lengths.len() as u64
            }
            MemoryAccounting::Exact => per_token * lengths.iter().map(|&s| s as u64).sum::<u64>(),
        }
    }
}

/// Padded batch footprint `2·L·H·D·S_max·B·N`.
pub fn kv_footprint_padded(model: &ModelConfig, s_max: u32, n: u64) -> Result<Bytes, MemoryError> {
    if s_max > model.max_seq_len {
        return Err(MemoryError::LengthExceedsMax {
            len: s_max,
            max: model.max_seq_len,
        });
    }
    Ok(model.kv_bytes_per_token() * s_max as u64 * n)
}

/// Unpadded footprint `2·L·H·D·B·ΣS_i`.
pub fn kv_footprint_exact(model: &ModelConfig, lengths: &[u32]) -> Result<Bytes, MemoryError> {
    if let Some(&len) = lengths.iter().find(|&&s| s > model.max_seq_len) {
        return Err(MemoryError::LengthExceedsMax {
            len,
            max: model.max_seq_len,
        });
    }
    Ok(MemoryAccounting::Exact.footprint(model, lengths))
}

/// Fraction of padded memory that is padding: `(S_max − S_avg) / S_max`,
/// with `S_avg` the arithmetic mean.
pub fn waste_ratio(lengths: &[u32]) -> Result<f64, MemoryError> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(MemoryError::EmptyBatch);
    }
    let s_max = *lengths.iter().max().expect("non-empty") as f64;
    let s_avg = lengths.iter().map(|&s| s as f64).sum::<f64>() / lengths.len() as f64;
    Ok((s_max - s_avg) / s_max)
}

/// `floor((1 − reserve) × (total − model))`. The reserve fraction is resolved
/// to parts per billion so the product is exact integer arithmetic.
pub fn safe_memory(gpu: &GpuConfig) -> Bytes {
    let keep_ppb = ((1.0 - gpu.reserve_fraction) * 1e9).round() as u128;
    (gpu.remaining() as u128 * keep_ppb / 1_000_000_000) as Bytes
}

/// Tokens of KV cache that fit in `safe_bytes`.
pub fn token_budget_for(model: &ModelConfig, safe_bytes: Bytes) -> u64 {
    safe_bytes / model.kv_bytes_per_token()
}

/// `floor(M_safe / 2LHDB)`.
pub fn token_budget(model: &ModelConfig, gpu: &GpuConfig) -> u64 {
    token_budget_for(model, safe_memory(gpu))
}

/// Largest `N` such that the first `N` lengths sum to at most `budget`.
pub fn max_safe_batch(lengths: &[u32], budget: u64) -> usize {
    let mut sum = 0u64;
    for (i, &s) in lengths.iter().enumerate() {
        sum += s as u64;
        if sum > budget {
            return i;
        }
    }
    lengths.len()
}

/// Empirical length distribution over integer token bins `[edges[i], edges[i+1])`.
///
/// A bin's mass sits at the mean of the integer lengths it spans,
/// `(lo + hi − 1) / 2`, so a unit-width bin is an exact point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthHistogram {
    edges: Vec<u32>,
    counts: Vec<u64>,
}

impl LengthHistogram {
    pub fn new(edges: Vec<u32>, counts: Vec<u64>) -> Result<Self, MemoryError> {
        if edges.len() < 2 || counts.len() + 1 != edges.len() {
            return Err(MemoryError::Histogram(format!(
                "need k+1 edges for k counts, got {} edges and {} counts",
                edges.len(),
                counts.len()
            )));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MemoryError::Histogram("edges must be strictly increasing".into()));
        }
        Ok(LengthHistogram { edges, counts })
    }

    /// Exact empirical histogram: one unit bin per distinct length.
    pub fn from_lengths(lengths: &[u32]) -> Result<Self, MemoryError> {
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        if sorted.is_empty() {
            return Err(MemoryError::Histogram("no lengths".into()));
        }
        let mut edges = vec![sorted[0]];
        let mut counts = Vec::new();
        let mut i = 0;
        while i < sorted.len() {
            let v = sorted[i];
            let mut j = i;
            while j < sorted.len() && sorted[j] == v {
                j += 1;
            }
            if *edges.last().expect("non-empty") < v {
                // zero-mass filler between distinct values
                edges.push(v);
                counts.push(0);
            }
            edges.push(v + 1);
            counts.push((j - i) as u64);
            i = j;
        }
        Self::new(edges, counts)
    }

    pub fn edges(&self) -> &[u32] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(representative length, mass)` for every non-empty bin, in order.
    pub fn points(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| ((self.edges[i] as f64 + self.edges[i + 1] as f64 - 1.0) / 2.0, c))
    }

    /// Empirical density at length `s` (mass per token of its bin).
    pub fn density(&self, s: u32) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        match self.edges.windows(2).position(|w| w[0] <= s && s < w[1]) {
            Some(i) => self.counts[i] as f64 / (self.edges[i + 1] - self.edges[i]) as f64 / total as f64,
            None => 0.0,
        }
    }

    /// Mean of the mass whose representative length satisfies `pred`.
    pub fn conditional_mean(&self, pred: impl Fn(f64) -> bool) -> Option<f64> {
        let (mut mass, mut weighted) = (0.0, 0.0);
        for (s, c) in self.points().filter(|(s, _)| pred(*s)) {
            mass += c as f64;
            weighted += c as f64 * s;
        }
        (mass > 0.0).then(|| weighted / mass)
    }
}

/// Check that `buckets` are contiguous, disjoint, and ordered.
pub fn check_contiguous(buckets: &[(u32, u32)]) -> Result<(), MemoryError> {
    for &(lo, up) in buckets {
        if lo >= up {
            return Err(MemoryError::Overlap { from: up, to: lo });
        }
    }
    for w in buckets.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.1 < b.0 {
            return Err(MemoryError::Gap { from: a.1, to: b.0 });
        }
        if a.1 > b.0 {
            return Err(MemoryError::Overlap { from: b.0, to: a.1 });
        }
    }
    Ok(())
}

/// Distribution-weighted padding waste of a bucket partition: each unit of
/// mass at length `S` in bucket `[L_b, U_b)` contributes `1 − S/U_b`,
/// normalized by the total mass.
pub fn expected_waste(hist: &LengthHistogram, buckets: &[(u32, u32)]) -> Result<f64, MemoryError> {
    check_contiguous(buckets)?;
    let total = hist.total();
    if total == 0 {
        return Err(MemoryError::Histogram("histogram has no mass".into()));
    }
    let (first, last) = match (buckets.first(), buckets.last()) {
        (Some(f), Some(l)) => (f.0, l.1),
        _ => {
            return Err(MemoryError::Gap {
                from: hist.edges[0],
                to: *hist.edges.last().expect("edges"),
            })
        }
    };
    let mut acc = 0.0;
    let mut b = 0;
    for (s, mass) in hist.points() {
        if s < first as f64 {
            return Err(MemoryError::Gap {
                from: s.floor() as u32,
                to: first,
            });
        }
        if s >= last as f64 {
            return Err(MemoryError::Gap {
                from: last,
                to: s.floor() as u32 + 1,
            });
        }
        while s >= buckets[b].1 as f64 {
            b += 1;
        }
        acc += mass as f64 * (1.0 - s / buckets[b].1 as f64);
    }
    Ok(acc / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    fn model(l: u32, h: u32, d: u32, b: u32) -> ModelConfig {
        ModelConfig {
            layers: l,
            heads: h,
            head_dim: d,
            bytes_per_elem: b,
            max_seq_len: 4096,
        }
    }

    #[test]
    fn padded_footprint_arithmetic() {
        let m = model(40, 40, 128, 2);
        assert_eq!(kv_footprint_padded(&m, 1024, 8).unwrap(), 6_710_886_400);
        assert_eq!(kv_footprint_padded(&m, 1024, 0).unwrap(), 0);
        assert_eq!(kv_footprint_padded(&m, 1, 1).unwrap(), 2 * 40 * 40 * 128 * 2);
        assert_eq!(
            kv_footprint_padded(&m, 4097, 1),
            Err(MemoryError::LengthExceedsMax { len: 4097, max: 4096 })
        );
    }

    #[test]
    fn exact_footprint_arithmetic() {
        let m = model(1, 1, 1, 2);
        assert_eq!(kv_footprint_exact(&m, &[100, 200]).unwrap(), 1200);
        assert_eq!(kv_footprint_exact(&m, &[]).unwrap(), 0);
        let m = model(40, 40, 128, 2);
        assert_eq!(
            kv_footprint_exact(&m, &[512; 6]).unwrap(),
            kv_footprint_padded(&m, 512, 6).unwrap()
        );
        assert!(kv_footprint_exact(&m, &[5000]).is_err());
    }

    #[test]
    fn waste_ratio_cases() {
        assert_eq!(waste_ratio(&[1024, 256, 256, 256]).unwrap(), 0.5625);
        assert_eq!(waste_ratio(&[512, 512, 512]).unwrap(), 0.0);
        let w = waste_ratio(&[1, 1024]).unwrap();
        assert!((w - (1024.0 - 512.5) / 1024.0).abs() < 1e-15);
        assert_eq!(waste_ratio(&[]), Err(MemoryError::EmptyBatch));
    }

    #[test]
    fn expected_waste_cases() {
        let h = LengthHistogram::from_lengths(&[500; 10]).unwrap();
        assert_eq!(expected_waste(&h, &[(0, 1000)]).unwrap(), 0.5);
        let h = LengthHistogram::from_lengths(&[1023]).unwrap();
        assert!(expected_waste(&h, &[(0, 1024)]).unwrap() < 1e-3);
        // gap between buckets
        assert_eq!(
            expected_waste(&h, &[(0, 100), (200, 1024)]),
            Err(MemoryError::Gap { from: 100, to: 200 })
        );
        // mass outside the partition
        assert!(matches!(expected_waste(&h, &[(0, 100)]), Err(MemoryError::Gap { .. })));
    }

    #[test]
    fn safe_memory_cases() {
        let gpu = GpuConfig {
            total_mem: 40 * GIB,
            model_mem: 30 * GIB,
            reserve_fraction: 0.10,
        };
        assert_eq!(safe_memory(&gpu), 9_663_676_416);
        assert_eq!(
            safe_memory(&GpuConfig {
                model_mem: 40 * GIB,
                ..gpu
            }),
            0
        );
        assert_eq!(
            safe_memory(&GpuConfig {
                reserve_fraction: 0.0,
                ..gpu
            }),
            10 * GIB
        );
    }

    #[test]
    fn token_budget_cases() {
        let m = model(32, 32, 128, 2);
        assert_eq!(m.kv_bytes_per_token(), 524_288);
        assert_eq!(token_budget_for(&m, 9_663_676_416), 18_432);
        assert_eq!(token_budget_for(&m, 524_287), 0);
        let m4 = model(32, 32, 128, 4);
        assert_eq!(token_budget_for(&m4, 9_663_676_416), 18_432 / 2);
    }

    #[test]
    fn max_safe_batch_cases() {
        assert_eq!(max_safe_batch(&[100, 200, 300, 400], 600), 3);
        assert_eq!(max_safe_batch(&[100, 200, 300, 400], 0), 0);
        assert_eq!(max_safe_batch(&[700], 600), 0);
        assert_eq!(max_safe_batch(&[], 600), 0);
    }

    #[test]
    fn config_validation() {
        let mut m = model(40, 40, 128, 3);
        assert!(m.validate().is_err());
        m.bytes_per_elem = 2;
        assert!(m.validate().is_ok());
        let gpu = GpuConfig {
            total_mem: 10,
            model_mem: 11,
            reserve_fraction: 0.1,
        };
        assert!(gpu.validate().is_err());
        let gpu = GpuConfig {
            total_mem: 10,
            model_mem: 1,
            reserve_fraction: 1.2,
        };
        assert!(matches!(
            gpu.validate(),
            Err(MemoryError::InvalidGpu {
                field: "reserve_fraction",
                ..
            })
        ));
    }

    #[test]
    fn histogram_queries() {
        let h = LengthHistogram::from_lengths(&[10, 10, 20]).unwrap();
        assert_eq!(h.edges(), &[10, 11, 20, 21]);
        assert_eq!(h.counts(), &[2, 0, 1]);
        assert_eq!(h.total(), 3);
        assert!((h.density(10) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(h.density(15), 0.0);
        let mean = h.conditional_mean(|_| true).unwrap();
        assert!((mean - 40.0 / 3.0).abs() < 1e-12);
        assert_eq!(h.conditional_mean(|s| s > 100.0), None);
        assert!(LengthHistogram::new(vec![0, 0], vec![1]).is_err());
    }
}
