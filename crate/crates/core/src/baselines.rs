//! Comparison scheduling policies run inside the same simulator.
//!
//! `static-proxy` is a fixed-size FIFO batcher on a coupled pipeline (each
//! worker prefills and then decodes its own batch). `continuous-proxy` is the
//! disaggregated pipeline with a single unsplittable bucket and FIFO order.
//! Both are stand-ins for whole systems, not reimplementations of them.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::batch::OversizeError;
use crate::memory::{Bytes, ModelConfig};
use crate::workload::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolicyKind {
    #[default]
    BucketServe,
    StaticBatch {
        fixed_n: usize,
    },
    ContinuousNoBucket,
}

impl PolicyKind {
    /// Label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::BucketServe => "bucketserve",
            PolicyKind::StaticBatch { .. } => "static-proxy",
            PolicyKind::ContinuousNoBucket => "continuous-proxy",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::BucketServe => f.write_str("bucketserve"),
            PolicyKind::StaticBatch { fixed_n } => write!(f, "static:{fixed_n}"),
            PolicyKind::ContinuousNoBucket => f.write_str("continuous"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bucketserve" => Ok(PolicyKind::BucketServe),
            "continuous" => Ok(PolicyKind::ContinuousNoBucket),
            _ => {
                let n = s
                    .strip_prefix("static:")
                    .ok_or_else(|| format!("unknown policy `{s}` (expected bucketserve, static:<n>, continuous)"))?;
                let fixed_n: usize = n.parse().map_err(|_| format!("bad batch size in `{s}`"))?;
                if fixed_n == 0 {
                    return Err("static batch size must be >= 1".into());
                }
                Ok(PolicyKind::StaticBatch { fixed_n })
            }
        }
    }
}

impl Serialize for PolicyKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Queue entry for the static batcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticEntry {
    pub id: RequestId,
    pub input_len: u32,
}

/// A static batch: ids in FIFO order, charged at `s_max` each.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticBatch {
    pub ids: Vec<RequestId>,
    pub lengths: Vec<u32>,
    pub s_max: u32,
    pub footprint: Bytes,
    pub halvings: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticOutcome {
    pub batch: Option<StaticBatch>,
    pub rejected: Vec<OversizeError>,
}

/// Form a static batch from the head of `queue`.
///
/// Waits for `fixed_n` requests unless `flush` is set (no more arrivals are
/// coming). If the padded footprint of the first `n` requests exceeds
/// `safe`, `n` is halved until it fits; each halving is counted. A head
/// request that exceeds `safe` alone is rejected.
pub fn schedule_static(
    queue: &mut VecDeque<StaticEntry>,
    fixed_n: usize,
    model: &ModelConfig,
    safe: Bytes,
    flush: bool,
) -> StaticOutcome {
    let mut out = StaticOutcome::default();
    let per_token = model.kv_bytes_per_token();
    while let Some(head) = queue.front() {
        if head.input_len as u64 * per_token <= safe {
            break;
        }
        let head = queue.pop_front().expect("non-empty");
        out.rejected.push(OversizeError {
            id: head.id,
            input_len: head.input_len,
            footprint: head.input_len as u64 * per_token,
            safe,
        });
    }
    if queue.is_empty() || (queue.len() < fixed_n && !flush) {
        return out;
    }
    let mut n = fixed_n.min(queue.len());
    let mut halvings = 0;
    loop {
        let s_max = queue.iter().take(n).map(|e| e.input_len).max().expect("n >= 1");
        let footprint = s_max as u64 * n as u64 * per_token;
        if footprint <= safe {
            let taken: Vec<StaticEntry> = queue.drain(..n).collect();
            out.batch = Some(StaticBatch {
                ids: taken.iter().map(|e| e.id).collect(),
                lengths: taken.iter().map(|e| e.input_len).collect(),
                s_max,
                footprint,
                halvings,
            });
            return out;
        }
        // n == 1 always fits after the oversize filter above
        n = (n / 2).max(1);
        halvings += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_model() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 1,
            head_dim: 1,
            bytes_per_elem: 1,
            max_seq_len: 4096,
        }
    }

    fn queue(lens: &[u32]) -> VecDeque<StaticEntry> {
        lens.iter()
            .enumerate()
            .map(|(i, &l)| StaticEntry {
                id: i as u64,
                input_len: l,
            })
            .collect()
    }

    #[test]
    fn policy_strings() {
        assert_eq!("bucketserve".parse::<PolicyKind>().unwrap(), PolicyKind::BucketServe);
        assert_eq!(
            "continuous".parse::<PolicyKind>().unwrap(),
            PolicyKind::ContinuousNoBucket
        );
        assert_eq!(
            "static:8".parse::<PolicyKind>().unwrap(),
            PolicyKind::StaticBatch { fixed_n: 8 }
        );
        assert!("static:0".parse::<PolicyKind>().is_err());
        assert!("orca".parse::<PolicyKind>().is_err());
        assert_eq!(PolicyKind::StaticBatch { fixed_n: 3 }.label(), "static-proxy");
        assert_eq!(PolicyKind::ContinuousNoBucket.label(), "continuous-proxy");
        assert_eq!(PolicyKind::StaticBatch { fixed_n: 3 }.to_string(), "static:3");
    }

    #[test]
    fn takes_first_fixed_n() {
        let mut q = queue(&[10; 10]);
        let b = schedule_static(&mut q, 4, &unit_model(), 1_000_000, false)
            .batch
            .unwrap();
        assert_eq!(b.ids, vec![0, 1, 2, 3]);
        assert_eq!(b.halvings, 0);
        assert_eq!(q.len(), 6);
    }

    #[test]
    fn halves_on_overflow() {
        // padded at 100 tokens × 2 bytes: n=4 needs 800, n=2 needs 400
        let mut q = queue(&[100; 6]);
        let b = schedule_static(&mut q, 4, &unit_model(), 500, false).batch.unwrap();
        assert_eq!(b.ids.len(), 2);
        assert_eq!(b.halvings, 1);
        assert_eq!(b.footprint, 400);
    }

    #[test]
    fn waits_then_flushes() {
        let mut q = queue(&[10; 3]);
        assert!(schedule_static(&mut q, 4, &unit_model(), 1_000_000, false)
            .batch
            .is_none());
        let b = schedule_static(&mut q, 4, &unit_model(), 1_000_000, true)
            .batch
            .unwrap();
        assert_eq!(b.ids.len(), 3);
    }

    #[test]
    fn rejects_oversize_head() {
        let mut q = queue(&[1000, 10]);
        let out = schedule_static(&mut q, 1, &unit_model(), 100, false);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.batch.unwrap().ids, vec![1]);
    }
}
