use feel_sched::channel;
use feel_sched::config::ExperimentConfig;
use feel_sched::data::{self, PartitionScheme, PartitionSpec};
use feel_sched::latency;
use feel_sched::learners::{self, GradientVector, LabeledSample, LearnerKind, ModelParams};
use feel_sched::scheduler;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// (sizes, gradient norms, upload latencies) for a fleet of 1..=12 devices.
fn fleet() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>)> {
    (1usize..=12).prop_flat_map(|k| {
        (
            prop::collection::vec(1usize..500, k),
            prop::collection::vec(1e-3f64..1e2, k),
            prop::collection::vec(1e-5f64..1.0, k),
        )
    })
}

fn objective(p: &[f64], sizes: &[usize], norms: &[f64], upload: &[f64], rho: f64) -> f64 {
    let n = sizes.iter().sum::<usize>() as f64;
    p.iter()
        .enumerate()
        .map(|(k, &pk)| {
            let w = sizes[k] as f64 * norms[k] / n;
            rho * w * w / pk + (1.0 - rho) * pk * upload[k]
        })
        .sum()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn optimal_distribution_is_a_distribution((sizes, norms, upload) in fleet(), rho in 0.01f64..0.99) {
        let d = scheduler::solve_optimal_distribution(&sizes, &norms, &upload, rho, 1e-12).unwrap();
        prop_assert!(d.p.iter().all(|&p| p >= 0.0));
        prop_assert!((d.p.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        // geometric bisection over at most ~2100 decades of f64 range
        prop_assert!(d.evaluations <= 5000, "evaluations = {}", d.evaluations);
    }

    #[test]
    fn optimal_distribution_beats_random_points(
        (sizes, norms, upload) in fleet(),
        rho in 0.01f64..0.99,
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 12), 20),
    ) {
        let d = scheduler::solve_optimal_distribution(&sizes, &norms, &upload, rho, 1e-12).unwrap();
        let best = objective(&d.p, &sizes, &norms, &upload, rho);
        for r in raw {
            let q = normalize(&r[..sizes.len()]);
            prop_assert!(best <= objective(&q, &sizes, &norms, &upload, rho) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn mass_is_strictly_decreasing_in_the_multiplier(
        (sizes, norms, upload) in fleet(),
        rho in 0.01f64..0.99,
        a in 1e-6f64..10.0,
        gap in 1e-6f64..10.0,
    ) {
        let n = sizes.iter().sum::<usize>() as f64;
        let floor = upload.iter().cloned().fold(f64::INFINITY, f64::min) * (1.0 - rho);
        let mass = |lambda: f64| -> f64 {
            (0..sizes.len())
                .map(|k| sizes[k] as f64 / n * norms[k] * (rho / ((1.0 - rho) * upload[k] + lambda)).sqrt())
                .sum()
        };
        prop_assert!(mass(a - floor) > mass(a + gap - floor));
    }

    #[test]
    fn rescaling_latency_with_matching_rho_keeps_the_solution(
        (sizes, norms, upload) in fleet(),
        rho in 0.05f64..0.95,
        c in 0.01f64..100.0,
    ) {
        // ρ/(1−ρ)·T is what matters: scale T by c and the ratio by c
        let r = rho / (1.0 - rho) * c;
        let rho2 = r / (1.0 + r);
        let scaled: Vec<f64> = upload.iter().map(|t| t * c).collect();
        let a = scheduler::solve_optimal_distribution(&sizes, &norms, &upload, rho, 1e-13).unwrap();
        let b = scheduler::solve_optimal_distribution(&sizes, &norms, &scaled, rho2, 1e-13).unwrap();
        for (x, y) in a.p.iter().zip(&b.p) {
            prop_assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn sampling_without_replacement_picks_distinct_devices(
        raw in prop::collection::vec(0.0f64..1.0, 1..15),
        m_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let k = raw.len();
        let m = 1 + ((k - 1) as f64 * m_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = scheduler::sample_without_replacement(&raw, m, &mut rng).unwrap();
        let mut seen = d.sequence.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), m);
        prop_assert!(d.conditional_probs.iter().all(|&q| q > 0.0 && q <= 1.0 + 1e-12));
    }

    #[test]
    fn single_draw_estimator_is_unbiased(
        (sizes, norms, _upload) in fleet(),
        raw in prop::collection::vec(0.01f64..1.0, 12),
    ) {
        let k = sizes.len();
        let p = normalize(&raw[..k]);
        let n: usize = sizes.iter().sum();
        let grads: Vec<GradientVector> = norms.iter().enumerate().map(|(i, &s)| GradientVector::new(vec![s, -(i as f64) * s])).collect();
        let truth = learners::ground_truth_global_gradient(&grads, &sizes).unwrap();
        let mut mean = [0.0; 2];
        for i in 0..k {
            let g = scheduler::aggregate_single(&grads[i], sizes[i], n, p[i]).unwrap();
            mean[0] += p[i] * g.values()[0];
            mean[1] += p[i] * g.values()[1];
        }
        for (m, t) in mean.iter().zip(truth.values()) {
            prop_assert!((m - t).abs() <= 1e-9 * (1.0 + t.abs()));
        }
    }

    #[test]
    fn bandwidth_split_equalizes_and_beats_random_splits(
        snrs in prop::collection::vec(0.1f64..1e4, 1..10),
        raw in prop::collection::vec(0.01f64..1.0, 10),
    ) {
        let total = 1e6;
        let alloc = latency::allocate_bandwidth(&snrs, total).unwrap();
        prop_assert!((alloc.iter().sum::<f64>() - total).abs() <= 1e-9 * total);
        let time = |b: &[f64]| b.iter().zip(&snrs).map(|(b, g)| 1.0 / (b * (1.0 + g).log2())).fold(0.0, f64::max);
        let t_opt = time(&alloc);
        let other: Vec<f64> = normalize(&raw[..snrs.len()]).iter().map(|f| f * total).collect();
        prop_assert!(t_opt <= time(&other) * (1.0 + 1e-9));
    }

    #[test]
    fn uplink_rate_is_nonnegative_and_increasing(b in 1.0f64..1e8, g in 0.0f64..1e6, dg in 1e-3f64..10.0) {
        let r = channel::uplink_rate(b, g).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert!(channel::uplink_rate(b, g + dg).unwrap() > r);
        prop_assert!(channel::uplink_rate(b * 1.5, g).unwrap() >= r);
    }

    #[test]
    fn partition_conserves_and_repeats(n in 20usize..300, k in 1usize..10, seed in any::<u64>()) {
        let samples: Vec<LabeledSample> = (0..n).map(|i| LabeledSample::new(vec![i as f64], (i % 2) as f64 * 2.0 - 1.0)).collect();
        let spec = PartitionSpec { scheme: PartitionScheme::IidUniform, seed, sizes: None };
        let a = data::partition(samples.clone(), k, &spec).unwrap();
        let b = data::partition(samples, k, &spec).unwrap();
        prop_assert_eq!(a.total(), n);
        prop_assert_eq!(a.sizes(), b.sizes());
        prop_assert!(a.sizes().iter().all(|&s| s > 0));
        let mut ids: Vec<usize> = a.pooled().iter().map(|s| s.features[0] as usize).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn shards_bound_labels_per_device(per_label in 4usize..30, seed in any::<u64>()) {
        // 10 labels, 20 shards, 2 shards per device
        let samples: Vec<LabeledSample> = (0..10 * per_label * 2).map(|i| LabeledSample::new(vec![0.0], (i % 10) as f64)).collect();
        let spec = PartitionSpec {
            scheme: PartitionScheme::LabelSortedShards { shard_count: 20, shards_per_device: 2 },
            seed,
            sizes: None,
        };
        let fleet = data::partition(samples, 10, &spec).unwrap();
        for dev in fleet.datasets() {
            let mut labels: Vec<i64> = dev.iter().map(|s| s.label as i64).collect();
            labels.sort_unstable();
            labels.dedup();
            prop_assert!(labels.len() <= 2);
        }
    }

    #[test]
    fn losses_are_nonnegative_and_pooled_gradient_matches(
        w in prop::collection::vec(-3.0f64..3.0, 3),
        xs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..30),
        cuts in 1usize..4,
    ) {
        let kind = LearnerKind::LeastSquaresSvm { reg: 0.05 };
        let data: Vec<LabeledSample> = xs.iter().enumerate().map(|(i, x)| LabeledSample::new(x.clone(), if i % 3 == 0 { -1.0 } else { 1.0 })).collect();
        let model = ModelParams::new(w).unwrap();
        prop_assert!(learners::local_loss(&model, &data, kind).unwrap() >= 0.0);
        let cut = (data.len() / (cuts + 1)).max(1);
        let parts: Vec<&[LabeledSample]> = data.chunks(cut).collect();
        let grads: Vec<GradientVector> = parts.iter().map(|d| learners::local_gradient(&model, d, kind).unwrap()).collect();
        let sizes: Vec<usize> = parts.iter().map(|d| d.len()).collect();
        let global = learners::ground_truth_global_gradient(&grads, &sizes).unwrap();
        let pooled = learners::local_gradient(&model, &data, kind).unwrap();
        for (a, b) in global.values().iter().zip(pooled.values()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn config_round_trips(rounds in 1usize..5000, rho in 0.001f64..0.999, m in 1usize..30) {
        let mut cfg = ExperimentConfig::default();
        cfg.trainer.rounds = rounds;
        cfg.scheduler.devices_per_round = m;
        cfg.scheduler.rho = scheduler::RhoSetting::Value(rho);
        let back = ExperimentConfig::from_str_any(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
