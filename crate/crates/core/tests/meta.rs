use metalab_core::adaptation::{gd_adapt, AdaptationConfig, Distance};
use metalab_core::meta::{
    maml_meta_grad, maml_objective, meta_eval, meta_train, protonet_loss, protonet_loss_and_grad,
    reptile_alignment_diagnostic, MetaConfig, Method, Order, Regime,
};
use metalab_core::tasks::{
    sample_episode, BudgetLedger, Episode, SamplingStrategy, Split, SyntheticParams, TaskSource,
};
use metalab_core::tensor::{
    central_differences, relative_error, Activation, Batch, Head, Layer, LossSpec, Matrix, NetworkSpec, ParamVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(r: &mut ChaCha8Rng, rows: usize, dim: usize, classes: usize) -> Batch {
    let x = (0..rows * dim).map(|_| r.gen_range(-1.5..1.5)).collect();
    let y = (0..rows).map(|i| i % classes).collect();
    Batch::labeled(Matrix::from_vec(rows, dim, x).unwrap(), y).unwrap()
}

fn episode(support: Batch, query: Batch, ways: usize) -> Episode {
    Episode {
        support,
        query,
        ways,
        shots: 1,
        query_shots: 1,
        task_id: 0,
        support_rows: vec![],
        query_rows: vec![],
    }
}

#[test]
fn second_order_maml_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let spec = NetworkSpec::mlp(3, &[6], 3, Head::LinearLogits).unwrap();
        let theta = ParamVector::init(&spec, trial);
        let e = episode(random_batch(&mut r, 6, 3, 3), random_batch(&mut r, 6, 3, 3), 3);
        let inner = AdaptationConfig::constant(3, 0.4, LossSpec::cross_entropy());
        let exact = maml_meta_grad(&spec, &theta, std::slice::from_ref(&e), &inner, Order::Second)
            .unwrap();
        let fd = central_differences(&theta, 1e-5, |p| maml_objective(&spec, p, &e, &inner))
            .unwrap();
        let err = relative_error(exact.values(), fd.values());
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
}

#[test]
fn orders_agree_when_inner_hessian_vanishes() {
    // zero support inputs to a bias-free layer: the support loss is flat in θ
    let spec = NetworkSpec::new(
        vec![Layer::Dense {
            in_dim: 2,
            out_dim: 1,
            activation: Activation::Identity,
            bias: false,
        }],
        Head::LinearLogits,
    )
    .unwrap();
    let theta = ParamVector::for_spec(&spec, vec![0.3, -0.2]).unwrap();
    let s = Batch::labeled(Matrix::zeros(2, 2), vec![1, 0]).unwrap();
    let q = Batch::labeled(Matrix::from_vec(1, 2, vec![2.0, -1.0]).unwrap(), vec![0]).unwrap();
    let inner = AdaptationConfig::constant(3, 0.1, LossSpec::squared());
    let e = [episode(s, q, 1)];
    let a = maml_meta_grad(&spec, &theta, &e, &inner, Order::First).unwrap();
    let b = maml_meta_grad(&spec, &theta, &e, &inner, Order::Second).unwrap();
    assert_eq!(a, b);
}

#[test]
fn perfect_query_fit_gives_zero_meta_gradient() {
    let spec = NetworkSpec::mlp(1, &[], 1, Head::LinearLogits).unwrap();
    let theta = ParamVector::for_spec(&spec, vec![1.0, 0.0]).unwrap();
    let s = Batch::labeled(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![1]).unwrap();
    let inner = AdaptationConfig::constant(1, 0.5, LossSpec::squared());
    let e = [episode(s.clone(), s, 1)];
    for order in [Order::First, Order::Second] {
        let g = maml_meta_grad(&spec, &theta, &e, &inner, order).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn protonet_symmetric_point_costs_ln_two() {
    let spec = NetworkSpec::mlp(1, &[], 1, Head::EmbeddingOnly).unwrap();
    let theta = ParamVector::for_spec(&spec, vec![1.0, 0.0]).unwrap();
    let s = Batch::labeled(Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap(), vec![0, 1]).unwrap();
    let q = Batch::labeled(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![0]).unwrap();
    let e = episode(s, q, 2);
    let (l, g) = protonet_loss_and_grad(&spec, &theta, &e, Distance::SquaredEuclidean).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    let fd = central_differences(&theta, 1e-6, |p| {
        protonet_loss(&spec, p, &e, Distance::SquaredEuclidean)
    })
    .unwrap();
    for (a, b) in g.values().iter().zip(fd.values()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn protonet_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let spec = NetworkSpec::mlp(4, &[7], 5, Head::EmbeddingOnly).unwrap();
        let theta = ParamVector::init(&spec, 100 + trial);
        let e = episode(random_batch(&mut r, 6, 4, 3), random_batch(&mut r, 9, 4, 3), 3);
        for distance in [Distance::SquaredEuclidean, Distance::Euclidean] {
            let (_, g) = protonet_loss_and_grad(&spec, &theta, &e, distance).unwrap();
            let fd = central_differences(&theta, 1e-6, |p| protonet_loss(&spec, p, &e, distance))
                .unwrap();
            let err = relative_error(g.values(), fd.values());
            assert!(err < 1e-4, "trial {trial} {distance:?}: {err}");
        }
    }
}

#[test]
fn protonet_missing_class_is_clipped_without_gradient() {
    let spec = NetworkSpec::mlp(1, &[], 1, Head::EmbeddingOnly).unwrap();
    let theta = ParamVector::for_spec(&spec, vec![1.0, 0.0]).unwrap();
    let s = Batch::labeled(Matrix::from_vec(1, 1, vec![0.0]).unwrap(), vec![0]).unwrap();
    let q = Batch::labeled(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![1]).unwrap();
    let (l, g) =
        protonet_loss_and_grad(&spec, &theta, &episode(s, q, 2), Distance::SquaredEuclidean)
            .unwrap();
    assert_eq!(l, 30.0);
    assert!(g.values().iter().all(|&v| v == 0.0));
}

#[test]
fn protonet_separable_limit() {
    let spec = NetworkSpec::mlp(1, &[], 1, Head::EmbeddingOnly).unwrap();
    let theta = ParamVector::for_spec(&spec, vec![1.0, 0.0]).unwrap();
    let s = Batch::labeled(Matrix::from_vec(2, 1, vec![0.0, 40.0]).unwrap(), vec![0, 1]).unwrap();
    let (l, g) = protonet_loss_and_grad(
        &spec,
        &theta,
        &episode(s.clone(), s, 2),
        Distance::SquaredEuclidean,
    )
    .unwrap();
    assert!(l < 1e-12 && g.norm() < 1e-9);
}

fn synthetic() -> TaskSource {
    TaskSource::gaussian(&SyntheticParams::default(), 3).unwrap()
}

fn net_for(method: Method, ways: usize, dim: usize) -> NetworkSpec {
    if method.is_metric() {
        NetworkSpec::mlp(dim, &[32], 16, Head::EmbeddingOnly).unwrap()
    } else {
        NetworkSpec::mlp(dim, &[32], ways, Head::LinearLogits).unwrap()
    }
}

#[test]
fn fedavg_trains_exactly_like_reptile() {
    let src = synthetic();
    let mut cfg = MetaConfig::synthetic_preset(Method::Reptile, 5, 2);
    cfg.outer_steps = 30;
    let spec = net_for(Method::Reptile, 5, 16);
    let a = meta_train(&spec, &cfg, &src, Regime::Classical, 9).unwrap();
    let fed = MetaConfig {
        method: Method::Fedavg,
        ..cfg.clone()
    };
    let b = meta_train(&spec, &fed, &src, Regime::Classical, 9).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.curve, b.curve);

    let test = src.with_split(Split::Test);
    let fed_eval = meta_eval(&spec, &b.params, &test, &fed, 20, 4).unwrap();
    let zero = MetaConfig {
        eval_inner_steps: 0,
        ..cfg
    };
    let rep_eval = meta_eval(&spec, &a.params, &test, &zero, 20, 4).unwrap();
    assert_eq!(fed_eval.per_task, rep_eval.per_task);
}

#[test]
fn limited_regime_uses_exactly_the_bought_tasks() {
    let src = synthetic();
    let mut cfg = MetaConfig::synthetic_preset(Method::Fomaml, 5, 1);
    cfg.outer_steps = 400;
    cfg.inner.steps = 1;
    let spec = net_for(Method::Fomaml, 5, 16);
    let cost = cfg.episode_cost(true);
    let ledger = BudgetLedger::new(10 * cost, cost).unwrap();
    let out = meta_train(
        &spec,
        &cfg,
        &src,
        Regime::Limited {
            ledger,
            task_limit: None,
        },
        1,
    )
    .unwrap();
    assert_eq!(out.tasks_used.len(), 10);
    assert_eq!(out.labels_spent, 10 * cost);
    let ledger = out.ledger.unwrap();
    assert_eq!(ledger.spent(), ledger.total());

    let capped = meta_train(
        &spec,
        &cfg,
        &src,
        Regime::Limited {
            ledger: BudgetLedger::new(1_000_000, cost).unwrap(),
            task_limit: Some(3),
        },
        1,
    )
    .unwrap();
    assert_eq!(capped.tasks_used.len(), 3);
    assert_eq!(capped.labels_spent, 3 * cost);
}

#[test]
fn budget_below_one_task_is_a_config_error() {
    let cfg = MetaConfig::synthetic_preset(Method::Reptile, 5, 1);
    let spec = net_for(Method::Reptile, 5, 16);
    let ledger = BudgetLedger::new(4, 5).unwrap();
    let err = meta_train(
        &spec,
        &cfg,
        &synthetic(),
        Regime::Limited {
            ledger,
            task_limit: None,
        },
        0,
    )
    .unwrap_err();
    assert!(err.to_string().contains("budget"), "{err}");
}

#[test]
fn zero_outer_steps_returns_the_initialization() {
    let mut cfg = MetaConfig::synthetic_preset(Method::Maml, 5, 1);
    cfg.outer_steps = 0;
    let spec = net_for(Method::Maml, 5, 16);
    let out = meta_train(&spec, &cfg, &synthetic(), Regime::Classical, 7).unwrap();
    assert_eq!(out.params, ParamVector::init(&spec, 7));
}

#[test]
fn mean_accuracy_is_mean_of_tasks() {
    let cfg = MetaConfig::synthetic_preset(Method::Protonet, 5, 1);
    let spec = net_for(Method::Protonet, 5, 16);
    let theta = ParamVector::init(&spec, 2);
    let ev = meta_eval(&spec, &theta, &synthetic().with_split(Split::Validation), &cfg, 7, 1)
        .unwrap();
    let mean = ev.per_task.iter().sum::<f64>() / ev.per_task.len() as f64;
    assert_eq!(ev.per_task.len(), 7);
    assert_eq!(ev.mean_accuracy, mean);
}

#[test]
fn reptile_eps_one_single_task_equals_adaptation() {
    let src = synthetic();
    let mut cfg = MetaConfig::synthetic_preset(Method::Reptile, 5, 1);
    cfg.outer_steps = 1;
    cfg.meta_batch = 1;
    cfg.outer_schedule = metalab_core::adaptation::StepSchedule::Constant { lr: 1.0 };
    let spec = net_for(Method::Reptile, 5, 16);
    let cost = cfg.episode_cost(true);
    let out = meta_train(
        &spec,
        &cfg,
        &src,
        Regime::Limited {
            ledger: BudgetLedger::new(cost, cost).unwrap(),
            task_limit: None,
        },
        5,
    )
    .unwrap();
    let id = *out.tasks_used.iter().next().unwrap();
    let e = sample_episode(&src, 5, 1, 0, SamplingStrategy::Stratified, id, None).unwrap();
    let direct = gd_adapt(&spec, &ParamVector::init(&spec, 5), &e.support, &cfg.inner).unwrap();
    assert_eq!(out.params, direct);
}

#[test]
fn alignment_improves_as_inner_step_shrinks() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let spec = NetworkSpec::mlp(4, &[8], 3, Head::LinearLogits).unwrap();
    let theta = ParamVector::init(&spec, 8);
    let support = random_batch(&mut r, 9, 4, 3);
    let cos: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&a| {
            let inner = AdaptationConfig::constant(5, a, LossSpec::cross_entropy());
            reptile_alignment_diagnostic(&spec, &theta, &support, &inner).unwrap()
        })
        .collect();
    assert!(cos[0] < cos[1] && cos[1] < cos[2], "{cos:?}");
    assert!(cos[2] > 0.999, "{cos:?}");
}

#[test]
fn every_method_learns_the_synthetic_source() {
    let src = synthetic();
    let test = src.with_split(Split::Test);
    for method in [Method::Reptile, Method::Maml, Method::Fomaml, Method::Protonet] {
        for seed in 1..=3 {
            let mut cfg = MetaConfig::synthetic_preset(method, 5, 1);
            cfg.outer_steps = 300;
            let spec = net_for(method, 5, 16);
            let out = meta_train(&spec, &cfg, &src, Regime::Classical, seed).unwrap();
            let ev = meta_eval(&spec, &out.params, &test, &cfg, 50, seed).unwrap();
            assert!(
                ev.mean_accuracy > 0.9,
                "{method} seed {seed}: {}",
                ev.mean_accuracy
            );
        }
    }
}
