use metalab_bench::{
    aggregate, mean_ci95, run_experiment, sweep_shots, ExperimentConfig, Labeler, RunRecord,
};
use metalab_core::meta::Method;
use metalab_core::tasks::{save_dataset, Dataset};
use metalab_core::tensor::Matrix;
use proptest::prelude::*;

fn small(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        shots: 2,
        outer_steps: Some(15),
        eval_tasks: 6,
        ..Default::default()
    }
}

#[test]
fn one_row_per_seed_and_split() {
    let cfg = ExperimentConfig {
        budget: Some(300),
        ..small(Method::Reptile)
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.records.len(), 6);
    for split in ["validation", "test"] {
        let seeds: Vec<u64> = out
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.seed)
            .collect();
        assert_eq!(seeds, vec![1, 2, 3]);
    }
    assert!(out.records.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

#[test]
fn labels_spent_matches_the_ledger() {
    for labeler in [Labeler::Random, Labeler::Stratified, Labeler::Active] {
        let cfg = ExperimentConfig {
            budget: Some(95),
            labeler,
            ..small(Method::Reptile)
        };
        let out = run_experiment(&cfg).unwrap();
        for run in &out.runs {
            let ledger = run.ledger.as_ref().expect("limited runs keep their ledger");
            assert!(ledger.spent() <= 95);
            assert_eq!(ledger.spent(), 90, "{labeler}");
            for r in out.records.iter().filter(|r| r.seed == run.seed) {
                assert_eq!(r.labels_spent, ledger.spent());
            }
        }
    }
}

#[test]
fn query_labels_count_only_when_asked() {
    let base = ExperimentConfig {
        budget: Some(100),
        query_shots: Some(1),
        seeds: vec![1],
        ..small(Method::Fomaml)
    };
    let counted = run_experiment(&base).unwrap();
    assert_eq!(counted.runs[0].tasks_acquired, Some(6));
    let support_only = ExperimentConfig {
        budget_counts_query: false,
        ..base
    };
    let out = run_experiment(&support_only).unwrap();
    assert_eq!(out.runs[0].tasks_acquired, Some(10));
    assert_eq!(out.records[0].labels_spent, 100);
}

#[test]
fn classical_runs_never_hold_a_ledger() {
    let out = run_experiment(&small(Method::Protonet)).unwrap();
    assert!(out.runs.iter().all(|r| r.ledger.is_none() && r.error.is_none()));
    assert!(out.records.iter().all(|r| r.benchmark_id == "synth5 (5w-2s)"));
    assert!(out.records.iter().all(|r| r.labels_spent == 15 * 4 * 5 * (2 + 5)));
}

#[test]
fn task_limit_caps_acquisition() {
    let cfg = ExperimentConfig {
        budget: Some(10_000),
        task_limit: Some(4),
        ..small(Method::Reptile)
    };
    let out = run_experiment(&cfg).unwrap();
    assert!(out.runs.iter().all(|r| r.tasks_acquired == Some(4)));
    assert!(out.records.iter().all(|r| r.labels_spent == 40));
}

#[test]
fn diverging_seeds_become_nan_rows() {
    let cfg = ExperimentConfig {
        inner_lr: Some(1e200),
        seeds: vec![4, 5],
        ..small(Method::Reptile)
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.records.len(), 4);
    assert!(out.records.iter().all(|r| r.accuracy.is_nan()));
    assert!(out.runs.iter().all(|r| r.error.as_deref().unwrap().contains("numerical")));
    let agg = aggregate(&out.records).unwrap();
    assert!(agg.iter().all(|a| a.mean.is_none() && a.warning.is_some()));
}

#[test]
fn schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let cfg = ExperimentConfig {
        out: Some(path.clone()),
        seeds: vec![9],
        ..small(Method::Fedavg)
    };
    run_experiment(&cfg).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    for line in text.lines() {
        assert_eq!(line.split(',').count(), 9, "{line}");
    }
}

#[test]
fn file_backed_dataset_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    let (classes, per_class, dim) = (12, 16, 3);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            for k in 0..dim {
                x.push(c as f64 * if k == 0 { 1.0 } else { -0.5 } + 0.01 * i as f64);
            }
            y.push(c);
        }
    }
    let ds = Dataset {
        features: Matrix::from_vec(classes * per_class, dim, x).unwrap(),
        classes: y,
        users: None,
    };
    save_dataset(&path, &ds).unwrap();
    let cfg = ExperimentConfig {
        dataset: path.to_str().unwrap().into(),
        ways: 2,
        shots: 1,
        seeds: vec![1],
        ..small(Method::Reptile)
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.records[0].benchmark_id, "toy (2w-1s)");
    assert!(out.runs[0].error.is_none(), "{:?}", out.runs[0].error);
}

#[test]
fn sweep_picks_the_best_validation_mean() {
    let cfg = ExperimentConfig {
        budget: Some(400),
        seeds: vec![1, 2],
        ..small(Method::Reptile)
    };
    let s = sweep_shots(&cfg, &[1, 2, 4]).unwrap();
    assert_eq!(s.points.len(), 3);
    assert_eq!(s.records.len(), 3 * 4);
    let best = s.best().unwrap();
    for p in &s.points {
        assert!(p.validation.mean.unwrap() <= best.validation.mean.unwrap());
    }
    assert!(s.records.iter().all(|r| r.labels_spent <= 400));
}

fn rec(seed: u64, accuracy: f64) -> RunRecord {
    RunRecord {
        benchmark_id: "b".into(),
        method: "maml".into(),
        labeler: "random".into(),
        seed,
        split: "test".into(),
        accuracy,
        tasks_evaluated: 1,
        labels_spent: 0,
        outer_steps: 0,
    }
}

proptest! {
    #[test]
    fn interval_is_non_negative_and_mean_is_bracketed(accs in proptest::collection::vec(0.0f64..=1.0, 1..8)) {
        let records: Vec<RunRecord> = accs.iter().enumerate().map(|(i, &a)| rec(i as u64, a)).collect();
        let agg = aggregate(&records).unwrap();
        prop_assert_eq!(agg.len(), 1);
        let mean = agg[0].mean.unwrap();
        let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        match agg[0].ci95 {
            Some(ci) => prop_assert!(accs.len() >= 2 && ci >= 0.0),
            None => prop_assert_eq!(accs.len(), 1),
        }
        prop_assert_eq!(mean_ci95(&accs).unwrap().0, mean);
    }
}
