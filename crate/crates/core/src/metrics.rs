//! Run-time monitoring and the end-of-run report.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bucket::ChangeKind;
use crate::memory::{Bytes, MemoryAccounting};
use crate::workload::{RequestId, TaskClass};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{stream:?} event at t={time} precedes previous event at t={last}")]
    OutOfOrder { stream: Stream, time: f64, last: f64 },
    #[error("goodput needs at least one sweep point")]
    NoPoints,
}

/// Independent event streams; timestamps must be non-decreasing within each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Requests,
    Structural,
    Batches,
    Decode,
}

impl Stream {
    fn slot(self) -> usize {
        self as usize
    }
}

/// Time spent by one request in each pipeline phase. Recompute cycles add
/// to the same totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub queue: f64,
    pub prefill: f64,
    pub transfer: f64,
    pub decode: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.queue + self.prefill + self.transfer + self.decode
    }

    fn add(&mut self, other: &PhaseTimes) {
        self.queue += other.queue;
        self.prefill += other.prefill;
        self.transfer += other.transfer;
        self.decode += other.decode;
    }
}

/// Final state of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub class: TaskClass,
    pub arrival: f64,
    pub output_len: u32,
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
    pub slo_ttft: Option<f64>,
    pub slo_e2e: Option<f64>,
    pub phases: PhaseTimes,
}

impl RequestRecord {
    pub fn ttft(&self) -> Option<f64> {
        self.first_token.map(|t| t - self.arrival)
    }

    pub fn e2e(&self) -> Option<f64> {
        self.completion.map(|t| t - self.arrival)
    }

    /// Met every configured deadline. Unfinished requests never do.
    pub fn meets_slo(&self) -> bool {
        let Some(e2e) = self.e2e() else { return false };
        let ttft_ok = match (self.slo_ttft, self.ttft()) {
            (Some(limit), Some(t)) => t <= limit,
            (Some(_), None) => false,
            (None, _) => true,
        };
        ttft_ok && self.slo_e2e.is_none_or(|limit| e2e <= limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralRecord {
    pub time: f64,
    pub kind: ChangeKind,
    pub parent_range: (u32, u32),
    pub midpoint: Option<u32>,
    /// Expected padding waste of the queued requests over the new partition.
    pub expected_waste: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonitorEvent {
    Completion(RequestRecord),
    Rejection(RequestRecord),
    Structural(StructuralRecord),
    Suspension { id: RequestId },
    Batch { size: usize, waste: f64, halvings: u32 },
}

impl MonitorEvent {
    fn stream(&self) -> Stream {
        match self {
            MonitorEvent::Completion(_) | MonitorEvent::Rejection(_) => Stream::Requests,
            MonitorEvent::Structural(_) => Stream::Structural,
            MonitorEvent::Batch { .. } => Stream::Batches,
            MonitorEvent::Suspension { .. } => Stream::Decode,
        }
    }
}

/// System state at one scheduler tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSnapshot {
    pub time: f64,
    pub prefill_mem_in_use: Vec<Bytes>,
    pub decode_mem_in_use: Vec<Bytes>,
    pub bucket_queue_lens: Vec<usize>,
    pub in_prefill: usize,
    pub in_transfer: usize,
    pub in_decode: usize,
    /// Arrivals over the trailing 1 s window.
    pub arrival_rate: f64,
    pub mean_queued_input_len: Option<f64>,
    pub recent_batch_latency: Option<f64>,
}

/// Collects event streams during a run.
#[derive(Debug, Clone, Default)]
pub struct Monitor {
    last: [Option<f64>; 4],
    records: Vec<RequestRecord>,
    completed: u64,
    rejected: u64,
    suspensions: u64,
    halvings: u64,
    batches: u64,
    waste_sum: f64,
    structural: Vec<StructuralRecord>,
}

impl Monitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_event(&mut self, time: f64, event: MonitorEvent) -> Result<(), MetricsError> {
        let stream = event.stream();
        let slot = &mut self.last[stream.slot()];
        if let Some(last) = *slot {
            if time < last {
                return Err(MetricsError::OutOfOrder { stream, time, last });
            }
        }
        *slot = Some(time);
        match event {
            MonitorEvent::Completion(r) => {
                self.completed += 1;
                self.records.push(r);
            }
            MonitorEvent::Rejection(r) => {
                self.rejected += 1;
                self.records.push(r);
            }
            MonitorEvent::Structural(s) => self.structural.push(s),
            MonitorEvent::Suspension { .. } => self.suspensions += 1,
            MonitorEvent::Batch { waste, halvings, .. } => {
                self.batches += 1;
                self.waste_sum += waste;
                self.halvings += halvings as u64;
            }
        }
        Ok(())
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn suspensions(&self) -> u64 {
        self.suspensions
    }

    pub fn structural_count(&self) -> usize {
        self.structural.len()
    }

    pub fn records(&self) -> &[RequestRecord] {
        &self.records
    }

    /// Build the report. `ctx` carries what the monitor cannot see.
    pub fn finish(mut self, ctx: ReportContext) -> MetricsReport {
        self.records.sort_by_key(|r| r.id);
        let done: Vec<&RequestRecord> = self.records.iter().filter(|r| r.completion.is_some()).collect();
        let generated: u64 = done.iter().map(|r| r.output_len as u64).sum();

        let first_arrival = self.records.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
        let last_arrival = self.records.iter().map(|r| r.arrival).fold(f64::NEG_INFINITY, f64::max);
        let last_done = done
            .iter()
            .filter_map(|r| r.completion)
            .fold(f64::NEG_INFINITY, f64::max);
        let makespan = if done.is_empty() {
            0.0
        } else {
            last_done - first_arrival
        };
        let span = last_arrival - first_arrival;
        let per_s = |x: f64| if makespan > 0.0 { x / makespan } else { 0.0 };

        let mut phases = PhaseTimes::default();
        for r in &done {
            phases.add(&r.phases);
        }
        let ttfts: Vec<f64> = done.iter().filter_map(|r| r.ttft()).collect();
        let e2es: Vec<f64> = done.iter().filter_map(|r| r.e2e()).collect();

        let mut counts = StructuralCounts::default();
        for s in &self.structural {
            match s.kind {
                ChangeKind::Split => counts.splits += 1,
                ChangeKind::Merge => counts.merges += 1,
                ChangeKind::Skip => counts.skips += 1,
            }
        }

        MetricsReport {
            policy: ctx.policy,
            memory_accounting: ctx.accounting,
            requests: self.records.len() as u64,
            completed: self.completed,
            rejected: self.rejected,
            suspensions: self.suspensions,
            halvings: self.halvings,
            generated_tokens: generated,
            makespan_s: makespan,
            tokens_per_s: per_s(generated as f64),
            server_rps: per_s(self.completed as f64),
            offered_rps: if span > 0.0 {
                self.records.len() as f64 / span
            } else {
                0.0
            },
            slo_attainment: slo_attainment(&self.records),
            ttft: Percentiles::of(&ttfts),
            e2e: Percentiles::of(&e2es),
            phase_totals: phases,
            batches: self.batches,
            mean_batch_waste: if self.batches > 0 {
                Some(self.waste_sum / self.batches as f64)
            } else {
                None
            },
            structural: counts,
            waste_trajectory: self
                .structural
                .iter()
                .filter_map(|s| {
                    s.expected_waste.map(|w| WastePoint {
                        time: s.time,
                        expected_waste: w,
                    })
                })
                .collect(),
            utilization: ctx.utilization,
            timing: ctx.timing,
        }
    }
}

/// Inputs to [`Monitor::finish`] that come from the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportContext {
    pub policy: String,
    pub accounting: MemoryAccounting,
    pub utilization: Utilization,
    pub timing: Option<Timing>,
}

/// Fraction of online requests that met their deadlines. Rejected or
/// unfinished online requests count as misses; offline requests are
/// ignored. `None` when there are no online requests or none carries a
/// deadline.
pub fn slo_attainment(records: &[RequestRecord]) -> Option<f64> {
    let online: Vec<&RequestRecord> = records.iter().filter(|r| r.class == TaskClass::Online).collect();
    if online.is_empty() || online.iter().all(|r| r.slo_ttft.is_none() && r.slo_e2e.is_none()) {
        return None;
    }
    let met = online.iter().filter(|r| r.meets_slo()).count();
    Some(met as f64 / online.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
}

impl Percentiles {
    /// Nearest-rank percentiles. `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            let r = (p / 100.0 * v.len() as f64).ceil() as usize;
            v[r.clamp(1, v.len()) - 1]
        };
        Some(Percentiles {
            p50: rank(50.0),
            p90: rank(90.0),
            p99: rank(99.0),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralCounts {
    pub splits: u64,
    pub merges: u64,
    pub skips: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WastePoint {
    pub time: f64,
    pub expected_waste: f64,
}

/// Busy-time proxies in `[0, 1]`. Prefill: useful-token compute time over
/// worker time. Decode: step time weighted by KV occupancy over worker time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub prefill: f64,
    pub decode: f64,
}

/// Wall-clock measurements; these vary between runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Time in bucket assignment and adjustment.
    pub bucketing_overhead_s: f64,
    /// Time in the whole event loop.
    pub sim_wall_s: f64,
}

impl Timing {
    pub fn overhead_fraction(&self) -> f64 {
        if self.sim_wall_s > 0.0 {
            self.bucketing_overhead_s / self.sim_wall_s
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub memory_accounting: MemoryAccounting,
    pub requests: u64,
    pub completed: u64,
    pub rejected: u64,
    pub suspensions: u64,
    pub halvings: u64,
    pub generated_tokens: u64,
    pub makespan_s: f64,
    pub tokens_per_s: f64,
    pub server_rps: f64,
    pub offered_rps: f64,
    pub slo_attainment: Option<f64>,
    pub ttft: Option<Percentiles>,
    pub e2e: Option<Percentiles>,
    pub phase_totals: PhaseTimes,
    pub batches: u64,
    pub mean_batch_waste: Option<f64>,
    pub structural: StructuralCounts,
    pub waste_trajectory: Vec<WastePoint>,
    pub utilization: Utilization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Table,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(ReportFormat::Json),
            "table" => Some(ReportFormat::Table),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

pub const SWEEP_CSV_HEADER: &str = "load_rps,server_rps,slo_attainment,tokens_per_s";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report is serializable");
            out.push(b'\n');
            out
        }
        ReportFormat::Csv => format!(
            "{SWEEP_CSV_HEADER}\n{},{},{},{}\n",
            report.offered_rps,
            report.server_rps,
            opt(report.slo_attainment),
            report.tokens_per_s
        )
        .into_bytes(),
        ReportFormat::Table => table(report).into_bytes(),
    }
}

fn table(r: &MetricsReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("policy".into(), r.policy.clone()),
        (
            "memory_accounting".into(),
            format!("{:?}", r.memory_accounting).to_lowercase(),
        ),
        ("requests".into(), r.requests.to_string()),
        ("completed".into(), r.completed.to_string()),
        ("rejected".into(), r.rejected.to_string()),
        ("suspensions".into(), r.suspensions.to_string()),
        ("halvings".into(), r.halvings.to_string()),
        ("generated_tokens".into(), r.generated_tokens.to_string()),
        ("makespan_s".into(), format!("{:.3}", r.makespan_s)),
        ("tokens_per_s".into(), format!("{:.1}", r.tokens_per_s)),
        ("server_rps".into(), format!("{:.3}", r.server_rps)),
        ("offered_rps".into(), format!("{:.3}", r.offered_rps)),
        (
            "slo_attainment".into(),
            r.slo_attainment.map_or("-".into(), |a| format!("{a:.4}")),
        ),
    ];
    for (name, p) in [("ttft", &r.ttft), ("e2e", &r.e2e)] {
        let v = p.map_or("-".into(), |p| {
            format!("p50 {:.4}  p90 {:.4}  p99 {:.4}", p.p50, p.p90, p.p99)
        });
        rows.push((format!("{name}_s"), v));
    }
    let ph = &r.phase_totals;
    rows.push((
        "phase_totals_s".into(),
        format!(
            "queue {:.3}  prefill {:.3}  transfer {:.3}  decode {:.3}",
            ph.queue, ph.prefill, ph.transfer, ph.decode
        ),
    ));
    rows.push(("batches".into(), r.batches.to_string()));
    rows.push((
        "mean_batch_waste".into(),
        r.mean_batch_waste.map_or("-".into(), |w| format!("{w:.4}")),
    ));
    rows.push((
        "structural".into(),
        format!(
            "splits {}  merges {}  skips {}",
            r.structural.splits, r.structural.merges, r.structural.skips
        ),
    ));
    rows.push((
        "utilization".into(),
        format!(
            "prefill {:.3}  decode {:.3}",
            r.utilization.prefill, r.utilization.decode
        ),
    ));
    if let Some(t) = r.timing {
        rows.push((
            "bucketing_overhead".into(),
            format!(
                "{:.6} s of {:.3} s ({:.3}%)",
                t.bucketing_overhead_s,
                t.sim_wall_s,
                100.0 * t.overhead_fraction()
            ),
        ));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v}");
    }
    out
}

/// How a goodput figure was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoodputStatus {
    /// Between two measured loads.
    Interpolated,
    /// A measured load sits exactly on the threshold boundary.
    Measured,
    /// Every tested load meets the threshold; the true figure is higher.
    Saturated,
    /// No tested load meets the threshold; the lowest load is reported.
    NeverMet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goodput {
    pub rps: f64,
    pub status: GoodputStatus,
}

/// Highest load whose attainment stays at or above `threshold`, linearly
/// interpolated at the first crossing. `points` are `(load, attainment)`.
pub fn goodput_at(threshold: f64, points: &[(f64, f64)]) -> Result<Goodput, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::NoPoints);
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts[0].1 < threshold {
        return Ok(Goodput {
            rps: pts[0].0,
            status: GoodputStatus::NeverMet,
        });
    }
    for w in pts.windows(2) {
        let ((l0, a0), (l1, a1)) = (w[0], w[1]);
        if a1 < threshold {
            if a0 == threshold {
                return Ok(Goodput {
                    rps: l0,
                    status: GoodputStatus::Measured,
                });
            }
            return Ok(Goodput {
                rps: l0 + (a0 - threshold) / (a0 - a1) * (l1 - l0),
                status: GoodputStatus::Interpolated,
            });
        }
    }
    Ok(Goodput {
        rps: pts.last().expect("non-empty").0,
        status: GoodputStatus::Saturated,
    })
}

/// One aggregated sweep row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub load_rps: f64,
    pub server_rps: f64,
    pub slo_attainment: Option<f64>,
    pub tokens_per_s: f64,
    pub server_rps_sd: Option<f64>,
    pub slo_attainment_sd: Option<f64>,
    pub tokens_per_s_sd: Option<f64>,
    pub repeats: usize,
}

fn mean_sd(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

impl SweepRow {
    /// Aggregate the repeats of one load point (mean and sample sd).
    pub fn from_reports(load_rps: f64, reports: &[MetricsReport]) -> Self {
        assert!(!reports.is_empty(), "a sweep row needs at least one run");
        let (server_rps, server_rps_sd) = mean_sd(&reports.iter().map(|r| r.server_rps).collect::<Vec<_>>());
        let (tokens_per_s, tokens_per_s_sd) = mean_sd(&reports.iter().map(|r| r.tokens_per_s).collect::<Vec<_>>());
        let att: Vec<f64> = reports.iter().filter_map(|r| r.slo_attainment).collect();
        let (slo_attainment, slo_attainment_sd) = if att.is_empty() {
            (None, None)
        } else {
            let (m, sd) = mean_sd(&att);
            (Some(m), sd)
        };
        SweepRow {
            load_rps,
            server_rps,
            slo_attainment,
            tokens_per_s,
            server_rps_sd,
            slo_attainment_sd,
            tokens_per_s_sd,
            repeats: reports.len(),
        }
    }
}

pub fn write_sweep_header<W: Write>(mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "{SWEEP_CSV_HEADER},server_rps_sd,slo_attainment_sd,tokens_per_s_sd,repeats"
    )
}

pub fn write_sweep_row<W: Write>(mut out: W, r: &SweepRow) -> std::io::Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        r.load_rps,
        r.server_rps,
        opt(r.slo_attainment),
        r.tokens_per_s,
        opt(r.server_rps_sd),
        opt(r.slo_attainment_sd),
        opt(r.tokens_per_s_sd),
        r.repeats
    )
}

/// `# goodput@0.8,<rps>,<status>` summary over the rows' attainment curve.
pub fn write_goodput_line<W: Write>(mut out: W, rows: &[SweepRow]) -> std::io::Result<()> {
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.slo_attainment.map(|a| (r.load_rps, a)))
        .collect();
    match goodput_at(0.8, &points) {
        Ok(g) => writeln!(out, "# goodput@0.8,{},{}", g.rps, status_str(g.status)),
        Err(_) => writeln!(out, "# goodput@0.8,,no_attainment_data"),
    }
}

/// Write sweep rows as CSV followed by the goodput comment line.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    write_sweep_header(&mut out)?;
    for r in rows {
        write_sweep_row(&mut out, r)?;
    }
    write_goodput_line(&mut out, rows)
}

fn status_str(s: GoodputStatus) -> &'static str {
    match s {
        GoodputStatus::Interpolated => "interpolated",
        GoodputStatus::Measured => "measured",
        GoodputStatus::Saturated => "saturated",
        GoodputStatus::NeverMet => "never_met",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, class: TaskClass, ttft: Option<f64>, done: bool) -> RequestRecord {
        RequestRecord {
            id,
            class,
            arrival: 0.0,
            output_len: 10,
            first_token: ttft,
            completion: if done { Some(5.0) } else { None },
            slo_ttft: Some(1.0),
            slo_e2e: None,
            phases: PhaseTimes {
                queue: 1.0,
                prefill: 1.0,
                transfer: 1.0,
                decode: 2.0,
            },
        }
    }

    fn ctx() -> ReportContext {
        ReportContext {
            policy: "bucketserve".into(),
            accounting: MemoryAccounting::Padded,
            utilization: Utilization::default(),
            timing: None,
        }
    }

    #[test]
    fn record_event_counts() {
        let mut m = Monitor::new();
        m.record_event(
            1.0,
            MonitorEvent::Completion(rec(0, TaskClass::Online, Some(0.5), true)),
        )
        .unwrap();
        assert_eq!(m.completed(), 1);
        m.record_event(
            1.0,
            MonitorEvent::Structural(StructuralRecord {
                time: 1.0,
                kind: ChangeKind::Split,
                parent_range: (0, 4096),
                midpoint: Some(2048),
                expected_waste: None,
            }),
        )
        .unwrap();
        assert_eq!(m.structural_count(), 1);
        m.record_event(2.0, MonitorEvent::Suspension { id: 0 }).unwrap();
        assert_eq!(m.suspensions(), 1);
        assert!(matches!(
            m.record_event(0.5, MonitorEvent::Suspension { id: 1 }),
            Err(MetricsError::OutOfOrder { .. })
        ));
        // streams are independent
        m.record_event(
            0.5,
            MonitorEvent::Batch {
                size: 1,
                waste: 0.0,
                halvings: 0,
            },
        )
        .unwrap();
    }

    #[test]
    fn attainment_cases() {
        let all = vec![
            rec(0, TaskClass::Online, Some(0.5), true),
            rec(1, TaskClass::Online, Some(0.9), true),
        ];
        assert_eq!(slo_attainment(&all), Some(1.0));
        let half = vec![
            rec(0, TaskClass::Online, Some(0.5), true),
            rec(1, TaskClass::Online, Some(2.0), true),
        ];
        assert_eq!(slo_attainment(&half), Some(0.5));
        let mut none = half.clone();
        for r in &mut none {
            r.slo_ttft = None;
        }
        assert_eq!(slo_attainment(&none), None);
        let rejected = vec![
            rec(0, TaskClass::Online, None, false),
            rec(1, TaskClass::Offline, Some(9.0), true),
        ];
        assert_eq!(slo_attainment(&rejected), Some(0.0));
        assert_eq!(slo_attainment(&[rec(1, TaskClass::Offline, Some(0.1), true)]), None);
    }

    #[test]
    fn goodput_cases() {
        let g = goodput_at(0.8, &[(8.0, 0.60), (4.0, 0.95)]).unwrap();
        assert_eq!(g.status, GoodputStatus::Interpolated);
        assert!((g.rps - (4.0 + 0.15 / 0.35 * 4.0)).abs() < 1e-12);
        assert!((g.rps - 5.714).abs() < 1e-3);
        let g = goodput_at(0.8, &[(3.0, 0.9)]).unwrap();
        assert_eq!((g.rps, g.status), (3.0, GoodputStatus::Saturated));
        let g = goodput_at(0.8, &[(2.0, 0.5), (4.0, 0.3)]).unwrap();
        assert_eq!((g.rps, g.status), (2.0, GoodputStatus::NeverMet));
        assert_eq!(goodput_at(0.8, &[]), Err(MetricsError::NoPoints));
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        let p = Percentiles::of(&v).unwrap();
        assert_eq!((p.p50, p.p90, p.p99), (50.0, 90.0, 99.0));
        assert_eq!(Percentiles::of(&[]), None);
        let p = Percentiles::of(&[3.0]).unwrap();
        assert_eq!(p.p99, 3.0);
    }

    #[test]
    fn empty_report_and_round_trip() {
        let r = Monitor::new().finish(ctx());
        assert_eq!(r.completed, 0);
        assert_eq!(r.tokens_per_s, 0.0);
        assert_eq!(r.slo_attainment, None);
        let json = emit_report(&r, ReportFormat::Json);
        let back: MetricsReport = serde_json::from_slice(&json).unwrap();
        assert_eq!(back, r);

        let mut m = Monitor::new();
        m.record_event(
            5.0,
            MonitorEvent::Completion(rec(0, TaskClass::Online, Some(0.3), true)),
        )
        .unwrap();
        m.record_event(
            0.0,
            MonitorEvent::Batch {
                size: 3,
                waste: 0.1 / 3.0,
                halvings: 1,
            },
        )
        .unwrap();
        let mut c = ctx();
        c.timing = Some(Timing {
            bucketing_overhead_s: 1e-4,
            sim_wall_s: 0.1,
        });
        let r = m.finish(c);
        let back: MetricsReport = serde_json::from_slice(&emit_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.phase_totals.total(), 5.0);
        assert_eq!(r.tokens_per_s, 2.0);
    }

    #[test]
    fn csv_formats() {
        let r = Monitor::new().finish(ctx());
        let csv = String::from_utf8(emit_report(&r, ReportFormat::Csv)).unwrap();
        assert!(csv.starts_with("load_rps,server_rps,slo_attainment,tokens_per_s\n"));
        let table = String::from_utf8(emit_report(&r, ReportFormat::Table)).unwrap();
        assert!(table.contains("tokens_per_s"));

        let rows = vec![
            SweepRow {
                load_rps: 4.0,
                server_rps: 3.9,
                slo_attainment: Some(0.95),
                tokens_per_s: 100.0,
                server_rps_sd: None,
                slo_attainment_sd: None,
                tokens_per_s_sd: None,
                repeats: 1,
            },
            SweepRow {
                load_rps: 8.0,
                server_rps: 7.0,
                slo_attainment: Some(0.6),
                tokens_per_s: 180.0,
                server_rps_sd: None,
                slo_attainment_sd: None,
                tokens_per_s_sd: None,
                repeats: 1,
            },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("# goodput@0.8,5.714"));
    }

    #[test]
    fn sweep_row_statistics() {
        let mut a = Monitor::new().finish(ctx());
        a.server_rps = 1.0;
        a.slo_attainment = Some(0.5);
        let mut b = a.clone();
        b.server_rps = 3.0;
        b.slo_attainment = Some(1.0);
        let row = SweepRow::from_reports(2.0, &[a, b]);
        assert_eq!(row.server_rps, 2.0);
        assert!((row.server_rps_sd.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(row.slo_attainment, Some(0.75));
        assert_eq!(row.repeats, 2);
    }
}
