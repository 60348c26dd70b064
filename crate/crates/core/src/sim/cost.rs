//! Linear execution-time model.
//!
//! Prefill cost scales with tokens processed; a decode step scales with the
//! KV bytes it has to read. Coefficients are calibration knobs.

use serde::{Deserialize, Serialize};

use crate::memory::Bytes;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub prefill_base: f64,
    pub prefill_per_token: f64,
    pub decode_step_base: f64,
    pub decode_per_kv_byte: f64,
    pub transfer_bandwidth: f64,
    pub transfer_latency: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            prefill_base: 0.005,
            prefill_per_token: 0.5e-6,
            decode_step_base: 0.003,
            // a step over 40 GiB of KV takes about 60 ms
            decode_per_kv_byte: 0.057 / (40u64 << 30) as f64,
            transfer_bandwidth: 600e9,
            transfer_latency: 1e-4,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("cost.prefill_base", self.prefill_base),
            ("cost.prefill_per_token", self.prefill_per_token),
            ("cost.decode_step_base", self.decode_step_base),
            ("cost.decode_per_kv_byte", self.decode_per_kv_byte),
            ("cost.transfer_latency", self.transfer_latency),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("`{name}` must be finite and >= 0, got {v}"));
            }
        }
        if !(self.transfer_bandwidth.is_finite() && self.transfer_bandwidth > 0.0) {
            return Err(format!(
                "`cost.transfer_bandwidth` must be > 0, got {}",
                self.transfer_bandwidth
            ));
        }
        Ok(())
    }

    /// `prefill_base + prefill_per_token × tokens`, where `tokens` is what
    /// the batch actually computes (padded or exact).
    pub fn prefill_time(&self, tokens: u64) -> f64 {
        self.prefill_base + self.prefill_per_token * tokens as f64
    }

    pub fn transfer_time(&self, bytes: Bytes) -> f64 {
        self.transfer_latency + bytes as f64 / self.transfer_bandwidth
    }

    /// One decode iteration reading `kv_bytes` of cache.
    pub fn decode_step_time(&self, kv_bytes: Bytes) -> f64 {
        self.decode_step_base + self.decode_per_kv_byte * kv_bytes as f64
    }
}
