use proptest::prelude::*;

use bucketsim::batch::{BatchController, DispatchPolicy};
use bucketsim::bucket::{Bucket, BucketSet, QueuedRequest};
use bucketsim::memory::{
    expected_waste, kv_footprint_exact, kv_footprint_padded, max_safe_batch, safe_memory, token_budget, waste_ratio,
    GpuConfig, LengthHistogram, MemoryAccounting, ModelConfig,
};
use bucketsim::sim::{self, ClusterConfig, SimConfig};
use bucketsim::trace::{load_trace, write_trace, TraceFormat};
use bucketsim::workload::{LengthDist, Request};
use bucketsim::{PolicyKind, TaskClass, Trace};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn tiny_model(max_seq_len: u32) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 4,
        bytes_per_elem: 2,
        max_seq_len,
    }
}

fn class() -> impl Strategy<Value = TaskClass> {
    prop_oneof![Just(TaskClass::Online), Just(TaskClass::Offline)]
}

prop_compose! {
    fn requests(max: usize)(
        rows in prop::collection::vec((0u32..10_000, 1u32..4096, 1u32..2048, class()), 0..max)
    ) -> Vec<Request> {
        // arrivals in milliseconds, sorted, so ids match file positions
        let mut rows = rows;
        rows.sort_by_key(|r| r.0);
        rows.into_iter()
            .enumerate()
            .map(|(i, (ms, input, output, class))| Request::new(i as u64, ms as f64 / 1000.0, input, output, class))
            .collect()
    }
}

prop_compose! {
    fn histogram()(
        bins in prop::collection::vec((1u32..200, 0u64..40), 1..40),
        start in 0u32..100,
        first in 1u64..40,
    ) -> LengthHistogram {
        let mut edges = vec![start];
        let mut counts = Vec::new();
        for (i, (w, c)) in bins.into_iter().enumerate() {
            edges.push(edges[i] + w);
            counts.push(if i == 0 { first } else { c });
        }
        LengthHistogram::new(edges, counts).unwrap()
    }
}

fn queued(id: u64, input_len: u32, class: TaskClass) -> QueuedRequest {
    QueuedRequest {
        id,
        input_len,
        arrival: id as f64,
        class,
    }
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn trace_round_trips_through_both_formats(reqs in requests(60)) {
        let trace = Trace::new(reqs).unwrap();
        for format in [TraceFormat::Csv, TraceFormat::JsonLines] {
            let mut buf = Vec::new();
            write_trace(&trace, format, &mut buf).unwrap();
            let back = load_trace(buf.as_slice(), format, &LengthDist::Constant { value: 1 }, 0).unwrap();
            prop_assert_eq!(&back, &trace);
        }
    }

    #[test]
    fn splitting_a_bucket_never_raises_expected_waste(hist in histogram(), frac in 0.0f64..1.0, pad in 0u32..50) {
        let top = *hist.edges().last().unwrap() + pad;
        let cut = 1 + ((top - 2) as f64 * frac) as u32;
        let coarse = expected_waste(&hist, &[(0, top)]).unwrap();
        let fine = expected_waste(&hist, &[(0, cut), (cut, top)]).unwrap();
        prop_assert!(fine <= coarse, "{fine} > {coarse} at cut {cut}");
        prop_assert!((0.0..1.0).contains(&coarse));
        prop_assert!((0.0..1.0).contains(&fine));
    }

    #[test]
    fn max_safe_batch_is_the_longest_fitting_prefix(
        lengths in prop::collection::vec(1u32..5000, 0..200),
        budget in 0u64..200_000,
    ) {
        let n = max_safe_batch(&lengths, budget);
        let sum = |k: usize| lengths[..k].iter().map(|&s| s as u64).sum::<u64>();
        prop_assert!(sum(n) <= budget);
        if n < lengths.len() {
            prop_assert!(sum(n + 1) > budget);
        }
    }

    #[test]
    fn waste_ratio_stays_in_unit_interval(lengths in prop::collection::vec(1u32..4096, 1..100)) {
        let w = waste_ratio(&lengths).unwrap();
        prop_assert!((0.0..1.0).contains(&w));
        let all_equal = lengths.iter().all(|&s| s == lengths[0]);
        prop_assert_eq!(w == 0.0, all_equal);
    }

    #[test]
    fn padding_never_undercounts(lengths in prop::collection::vec(1u32..4096, 1..100)) {
        let m = tiny_model(4096);
        let exact = kv_footprint_exact(&m, &lengths).unwrap();
        let s_max = *lengths.iter().max().unwrap();
        let padded = kv_footprint_padded(&m, s_max, lengths.len() as u64).unwrap();
        prop_assert!(exact <= padded);
        prop_assert_eq!(exact == padded, lengths.iter().all(|&s| s == s_max));
    }

    #[test]
    fn token_budget_brackets_safe_memory(
        total in 1u64..(1 << 40),
        model_share in 0.0f64..1.0,
        reserve in 0.0f64..0.5,
    ) {
        let gpu = GpuConfig {
            total_mem: total,
            model_mem: (total as f64 * model_share) as u64,
            reserve_fraction: reserve,
        };
        let m = tiny_model(4096);
        let per_token = m.kv_bytes_per_token();
        let safe = safe_memory(&gpu);
        let budget = token_budget(&m, &gpu);
        prop_assert!(safe <= gpu.remaining());
        prop_assert!(budget * per_token <= safe);
        prop_assert!(safe < (budget + 1) * per_token);
    }

    #[test]
    fn partition_survives_random_operations(
        ops in prop::collection::vec((0u8..3, 0u32..2048, 1usize..40, class()), 1..300),
        theta in prop_oneof![Just(0.0), Just(0.5), Just(1.0)],
    ) {
        let mut set = BucketSet::new(2048, theta).unwrap();
        let ctl = BatchController::new(tiny_model(2048), MemoryAccounting::Padded, 32 * 2048);
        let mut queued_ids = std::collections::BTreeSet::new();
        for (i, (op, len, n, class)) in ops.into_iter().enumerate() {
            match op {
                0 => {
                    let idx = set.assign(queued(i as u64, len, class)).unwrap();
                    prop_assert!(set.buckets()[idx].contains_len(len));
                    queued_ids.insert(i as u64);
                }
                1 => {
                    set.adjust_buckets(n);
                }
                _ => {
                    let b = n % set.buckets().len();
                    let out = ctl.form_batch(set.bucket_mut(b), class, DispatchPolicy::Sjf, 0, i as f64);
                    for r in &out.rejected {
                        prop_assert!(r.footprint > ctl.safe_memory());
                        prop_assert!(queued_ids.remove(&r.id));
                    }
                    if let Some(plan) = out.plan {
                        prop_assert!(plan.footprint <= ctl.safe_memory());
                        for id in plan.ids {
                            prop_assert!(queued_ids.remove(&id));
                        }
                    }
                }
            }
            prop_assert_eq!(set.check_partition(), Ok(()));
            prop_assert_eq!(set.total_queued(), queued_ids.len());
        }
    }

    #[test]
    fn merge_keeps_arrival_order(lens in prop::collection::vec(0u32..1024, 1..30)) {
        let mut set = BucketSet::from_buckets(
            1024,
            0.5,
            vec![Bucket::new(0, 128), Bucket::new(128, 512), Bucket::new(512, 1024)],
        );
        for (i, &len) in lens.iter().enumerate() {
            set.assign(queued(i as u64, len, TaskClass::Online)).unwrap();
        }
        set.adjust_buckets(lens.len() + 1);
        prop_assert_eq!(set.ranges(), vec![(0, 1024)]);
        let ids: Vec<u64> = set.buckets()[0].requests().map(|r| r.id).collect();
        prop_assert_eq!(ids, (0..lens.len() as u64).collect::<Vec<_>>());
    }
}

fn small_cluster(safe_tokens: u64, model: &ModelConfig) -> ClusterConfig {
    let remaining = (safe_tokens * model.kv_bytes_per_token()) * 10 / 9 + 16;
    ClusterConfig {
        prefill_workers: 1,
        decode_workers: 2,
        gpu: GpuConfig {
            total_mem: remaining + 1000,
            model_mem: 1000,
            reserve_fraction: 0.1,
        },
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn simulated_peaks_stay_within_safe_memory(
        reqs in requests(80),
        slack in 1u64..4,
        exact in any::<bool>(),
        policy in prop_oneof![
            Just(PolicyKind::BucketServe),
            Just(PolicyKind::ContinuousNoBucket),
            Just(PolicyKind::StaticBatch { fixed_n: 4 }),
        ],
    ) {
        let model = tiny_model(4096);
        let mut cfg = SimConfig::new(model, small_cluster(4096 * slack, &model));
        cfg.policy = policy;
        cfg.accounting = if exact { MemoryAccounting::Exact } else { MemoryAccounting::Padded };
        let n = reqs.len() as u64;
        let out = sim::run(&Trace::new(reqs).unwrap(), &cfg).unwrap();
        for &peak in &out.peak_memory {
            prop_assert!(peak <= out.safe_memory);
        }
        prop_assert_eq!(out.report.completed + out.report.rejected, n);
        for r in &out.requests {
            prop_assert!(r.timestamps.is_monotone(r.arrival_time));
        }
    }

    #[test]
    fn no_split_threshold_reduces_to_single_queue(reqs in requests(80)) {
        let model = tiny_model(4096);
        let mut bucketed = SimConfig::new(model, small_cluster(8192, &model));
        bucketed.split_threshold = 1.0;
        bucketed.online_policy = DispatchPolicy::Fcfs;
        bucketed.offline_policy = DispatchPolicy::Fcfs;
        let mut continuous = bucketed.clone();
        continuous.policy = PolicyKind::ContinuousNoBucket;
        let trace = Trace::new(reqs).unwrap();
        let a = sim::run(&trace, &bucketed).unwrap();
        let b = sim::run(&trace, &continuous).unwrap();
        let ids = |o: &sim::SimOutcome| o.schedule.iter().map(|s| s.ids.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&b));
    }
}
