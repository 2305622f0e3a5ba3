use std::collections::BTreeSet;

use metalab_core::active::{
    active_meta_train, active_select_labels, kmeanspp_cluster, sample_proportional, ActiveConfig,
    Granularity, Learner, SelectionStrategy,
};
use metalab_core::meta::{meta_train, MetaConfig, Method, Regime};
use metalab_core::tasks::{
    sample_unlabeled_task, BudgetLedger, SyntheticParams, TaskSource, UnlabeledPool,
};
use metalab_core::tensor::{squared_distance, Head, Matrix, NetworkSpec, ParamVector};
use metalab_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn source() -> TaskSource {
    TaskSource::gaussian(&SyntheticParams::default(), 12).unwrap()
}

fn reptile_setup() -> (NetworkSpec, MetaConfig) {
    let spec = NetworkSpec::mlp(16, &[16], 5, Head::LinearLogits).unwrap();
    let mut cfg = MetaConfig::synthetic_preset(Method::Reptile, 5, 2);
    cfg.eval_inner_steps = 3;
    (spec, cfg)
}

fn pool(seed: u64) -> UnlabeledPool {
    sample_unlabeled_task(&source(), 5, 0, seed, None).unwrap().pool
}

#[test]
fn selects_exactly_l_fresh_rows() {
    let (spec, cfg) = reptile_setup();
    let theta = ParamVector::init(&spec, 1);
    for granularity in [Granularity::PerCluster, Granularity::Single] {
        let mut p = pool(4);
        let mut ledger = BudgetLedger::new(1000, 10).unwrap();
        let active = ActiveConfig {
            granularity,
            ..ActiveConfig::new(12, 5)
        };
        let learner = Learner {
            spec: &spec,
            theta: &theta,
            cfg: &cfg,
        };
        let sel = active_select_labels(&mut p, learner, &active, &mut ledger, 9).unwrap();
        let distinct: BTreeSet<usize> = sel.rows.iter().copied().collect();
        assert_eq!(distinct.len(), 12);
        assert_eq!(ledger.spent(), 12);
        assert_eq!(sel.support.len(), 12);
        assert_eq!(sel.quotas.iter().sum::<usize>(), 12);
        assert!(sel.quotas.iter().all(|&q| q == 2 || q == 3));
        let expected_calls = match granularity {
            Granularity::PerCluster => 5,
            Granularity::Single => 12,
        };
        assert_eq!(sel.adaptation_calls, expected_calls);
    }
}

#[test]
fn exhaustive_selection_labels_everything() {
    let (spec, cfg) = reptile_setup();
    let theta = ParamVector::init(&spec, 2);
    let mut p = pool(1);
    let n = p.len();
    let mut ledger = BudgetLedger::new(n, 1).unwrap();
    let learner = Learner {
        spec: &spec,
        theta: &theta,
        cfg: &cfg,
    };
    let sel = active_select_labels(&mut p, learner, &ActiveConfig::new(n, 5), &mut ledger, 0)
        .unwrap();
    assert_eq!(sel.rows.len(), n);
    assert!(p.unrevealed().is_empty());
    assert_eq!(ledger.remaining(), 0);
}

#[test]
fn confident_model_still_returns_l_rows() {
    // a huge bias on one class saturates the softmax: zero entropy everywhere
    let spec = NetworkSpec::mlp(16, &[], 5, Head::LinearLogits).unwrap();
    let cfg = MetaConfig::synthetic_preset(Method::Fedavg, 5, 1);
    let mut values = vec![0.0; spec.param_count()];
    values[80] = 1000.0;
    let theta = ParamVector::for_spec(&spec, values).unwrap();
    let mut p = pool(2);
    let mut ledger = BudgetLedger::new(100, 1).unwrap();
    let learner = Learner {
        spec: &spec,
        theta: &theta,
        cfg: &cfg,
    };
    let sel = active_select_labels(&mut p, learner, &ActiveConfig::new(8, 4), &mut ledger, 3)
        .unwrap();
    assert_eq!(sel.rows.len(), 8);
}

#[test]
fn selection_is_deterministic() {
    let (spec, cfg) = reptile_setup();
    let theta = ParamVector::init(&spec, 5);
    let run = || {
        let mut p = pool(6);
        let mut ledger = BudgetLedger::new(100, 1).unwrap();
        let learner = Learner {
            spec: &spec,
            theta: &theta,
            cfg: &cfg,
        };
        active_select_labels(&mut p, learner, &ActiveConfig::new(10, 5), &mut ledger, 17)
            .unwrap()
            .rows
    };
    assert_eq!(run(), run());
}

#[test]
fn budget_shortfall_keeps_bought_labels() {
    let (spec, cfg) = reptile_setup();
    let theta = ParamVector::init(&spec, 5);
    let mut p = pool(6);
    let mut ledger = BudgetLedger::new(7, 1).unwrap();
    let learner = Learner {
        spec: &spec,
        theta: &theta,
        cfg: &cfg,
    };
    let err = active_select_labels(&mut p, learner, &ActiveConfig::new(10, 5), &mut ledger, 1)
        .unwrap_err();
    assert!(matches!(err, Error::Budget { .. }));
    assert_eq!(ledger.spent(), 7);
    assert_eq!(p.revealed().count(), 7);
}

#[test]
fn entropy_weighted_frequencies() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let h = 0.3;
    let trials = 10_000;
    let first = (0..trials)
        .filter(|_| sample_proportional(&[h, 3.0 * h], &mut r).unwrap() == 0)
        .count();
    let f = first as f64 / trials as f64;
    assert!((f - 0.25).abs() <= 0.02, "{f}");
}

#[test]
fn single_acquisition_when_budget_is_one_task() {
    let (spec, mut cfg) = reptile_setup();
    cfg.outer_steps = 20;
    let out = active_meta_train(&spec, &source(), 10, &cfg, &ActiveConfig::new(10, 5), true, 3)
        .unwrap();
    assert_eq!(out.tasks.len(), 1);
    assert_eq!(out.ledger.spent(), 10);
}

#[test]
fn one_task_per_step_until_the_budget_runs_out() {
    let (spec, mut cfg) = reptile_setup();
    cfg.outer_steps = 25;
    let out = active_meta_train(&spec, &source(), 100, &cfg, &ActiveConfig::new(10, 5), true, 3)
        .unwrap();
    assert_eq!(out.acquired_at, (0..10).collect::<Vec<_>>());
    assert_eq!(out.ledger.spent(), 100);
    assert_eq!(out.adaptation_calls, 50);
}

#[test]
fn uniform_strategy_matches_limited_training_counts() {
    let (spec, mut cfg) = reptile_setup();
    cfg.outer_steps = 12;
    cfg.shots = 2;
    let active = ActiveConfig {
        strategy: SelectionStrategy::Uniform,
        ..ActiveConfig::new(10, 5)
    };
    let a = active_meta_train(&spec, &source(), 60, &cfg, &active, true, 8).unwrap();
    let cost = cfg.episode_cost(true);
    let limited = meta_train(
        &spec,
        &cfg,
        &source(),
        Regime::Limited {
            ledger: BudgetLedger::new(60, cost).unwrap(),
            task_limit: None,
        },
        8,
    )
    .unwrap();
    assert_eq!(a.tasks.len(), 6);
    assert_eq!(a.ledger.spent(), limited.labels_spent);
    assert_eq!(a.adaptation_calls, 0);
}

#[test]
fn forced_two_point_centers_over_many_seeds() {
    let pts = Matrix::from_vec(2, 1, vec![0.0, 10.0]).unwrap();
    for seed in 0..50 {
        let c = kmeanspp_cluster(&pts, 2, 10, seed).unwrap();
        let mut centers = c.centers.into_vec();
        centers.sort_by(f64::total_cmp);
        assert_eq!(centers, vec![0.0, 10.0], "seed {seed}");
    }
}

#[test]
fn lloyd_sse_never_increases() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..100 {
        let pts: Vec<f64> = (0..60).map(|_| r.gen_range(-5.0..5.0)).collect();
        let m = Matrix::from_vec(30, 2, pts).unwrap();
        let c = kmeanspp_cluster(&m, 4, 10, trial).unwrap();
        for w in c.sse_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trial {trial}: {:?}", c.sse_trace);
        }
    }
}

proptest! {
    #[test]
    fn clusters_partition_and_are_nearest(
        pts in proptest::collection::vec(-10.0f64..10.0, 2..80),
        k in 1usize..5,
        seed in 0u64..1000,
    ) {
        let rows = pts.len() / 2;
        prop_assume!(rows >= k);
        let m = Matrix::from_vec(rows, 2, pts[..rows * 2].to_vec()).unwrap();
        let c = kmeanspp_cluster(&m, k, 5, seed).unwrap();
        let mut all: Vec<usize> = c.members.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..rows).collect::<Vec<_>>());
        for (j, members) in c.members.iter().enumerate() {
            for &i in members {
                let own = squared_distance(m.row(i), c.centers.row(j));
                for other in 0..k {
                    let d = squared_distance(m.row(i), c.centers.row(other));
                    prop_assert!(own < d || (own == d && j <= other));
                }
            }
        }
    }
}
