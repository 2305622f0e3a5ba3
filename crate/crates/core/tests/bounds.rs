use metalab_core::bounds::{
    bound_sweep, estimate_constants, maurer_bound, q_bound, sgm_stability, theorem2_bound_emp,
    theorem2_bound_q, BoundKind, SgmConstants, StabilityConstants,
};
use metalab_core::tensor::{Activation, Batch, Head, Layer, LossSpec, Matrix, NetworkSpec, ParamVector};
use proptest::prelude::*;

fn consts(inner_l: f64) -> StabilityConstants {
    StabilityConstants {
        inner: SgmConstants::new(inner_l, 1.0, 0.5, 10.0),
        outer: SgmConstants::new(1.0, 1.0, 1.0, 2.0),
        loss_bound: 1.0,
        delta: 0.05,
    }
}

#[test]
fn q_bound_shrinks_with_n_at_fixed_product() {
    let c = 4.0;
    let mut prev = f64::INFINITY;
    let mut n = 2usize;
    while n <= 1_000_000 {
        let v = q_bound(c / (n - 1) as f64, n, 1.0, 0.05).unwrap().value;
        assert!(v <= prev, "n = {n}");
        prev = v;
        n = (n as f64 * 1.5).ceil() as usize;
    }
}

#[test]
fn theorem2_q_is_non_increasing_in_n() {
    let k = consts(1.0);
    let mut prev = f64::INFINITY;
    for e in 1..=20 {
        let v = theorem2_bound_q(&k, 1 << e, 0.05).unwrap();
        assert!((v.c.unwrap() - 4.0).abs() < 1e-12);
        assert!(v.value <= prev);
        prev = v.value;
    }
}

#[test]
fn bounds_vanish_with_many_tasks() {
    let k = consts(1.0);
    let small = theorem2_bound_q(&k, 100, 0.05).unwrap().value;
    let large = theorem2_bound_q(&k, 100_000_000, 0.05).unwrap().value;
    assert!(large < 1e-2 * small);
    let qs = q_bound(4.0 / 99.0, 100, 1.0, 0.05).unwrap().value;
    let ql = q_bound(4.0 / 99_999_999.0, 100_000_000, 1.0, 0.05).unwrap().value;
    assert!(ql < 1e-2 * qs);
}

#[test]
fn emp_gap_is_twice_inner_stability_for_any_n() {
    let k = consts(2.0);
    for m in [2, 5, 50, 1000] {
        let beta = sgm_stability(2.0, 1.0, 0.5, 10.0, m).unwrap();
        for n in [2, 10, 1000, 1_000_000] {
            let q = theorem2_bound_q(&k, n, 0.05).unwrap().value;
            let e = theorem2_bound_emp(&k, n, m, 0.05).unwrap().value;
            assert!(((e - q) - 2.0 * beta).abs() < 1e-12);
            assert!(e - q > 0.0);
        }
    }
    let far = theorem2_bound_emp(&k, 10, 1_000_000_000, 0.05).unwrap();
    assert!(far.inner_term < 1e-6);
}

#[test]
fn sweep_bookkeeping() {
    let k = consts(1.5);
    let single = bound_sweep(&k, &[8], &[4], 0.05).unwrap();
    assert_eq!(single.len(), 2);
    assert_eq!(single[0].value, theorem2_bound_q(&k, 8, 0.05).unwrap().value);
    assert_eq!(single[1], theorem2_bound_emp(&k, 8, 4, 0.05).unwrap());

    let rows = bound_sweep(&k, &[2, 16, 256], &[2, 8, 64], 0.05).unwrap();
    assert_eq!(rows.len(), 18);
    for pair in rows.chunks(2) {
        let (q, e) = (&pair[0], &pair[1]);
        assert_eq!((q.kind, e.kind), (BoundKind::Theorem2Q, BoundKind::Theorem2Emp));
        assert!((e.value - q.value - e.inner_term).abs() <= 1e-15 * e.value.max(1.0));
        let same_n: Vec<f64> = rows
            .iter()
            .filter(|r| r.kind == BoundKind::Theorem2Q && r.n == q.n)
            .map(|r| r.value)
            .collect();
        assert!(same_n.iter().all(|&v| v == q.value));
    }
}

fn scalar() -> NetworkSpec {
    NetworkSpec::new(
        vec![Layer::Dense {
            in_dim: 1,
            out_dim: 1,
            activation: Activation::Identity,
            bias: false,
        }],
        Head::LinearLogits,
    )
    .unwrap()
}

#[test]
fn smoothness_of_scalar_linear_model_is_curvature() {
    let spec = scalar();
    let x = 1.7;
    let data = Batch::labeled(Matrix::from_vec(1, 1, vec![x]).unwrap(), vec![1]).unwrap();
    let center = ParamVector::for_spec(&spec, vec![0.2]).unwrap();
    let est = estimate_constants(&spec, &LossSpec::squared(), &center, &data, 6, 1.0, 3).unwrap();
    assert!((est.smoothness - x * x).abs() < 1e-9);
    assert_eq!(est.pairs, 15);
}

#[test]
fn constant_loss_has_zero_lipschitz_estimate() {
    let spec = scalar();
    let data = Batch::labeled(Matrix::zeros(3, 1), vec![0, 1, 0]).unwrap();
    let center = ParamVector::for_spec(&spec, vec![0.5]).unwrap();
    let est = estimate_constants(&spec, &LossSpec::squared(), &center, &data, 4, 1.0, 0).unwrap();
    assert_eq!(est.lipschitz, 0.0);
}

#[test]
fn identical_probes_are_skipped() {
    let spec = scalar();
    let data = Batch::labeled(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![0]).unwrap();
    let center = ParamVector::for_spec(&spec, vec![0.5]).unwrap();
    let est = estimate_constants(&spec, &LossSpec::squared(), &center, &data, 3, 0.0, 0).unwrap();
    assert_eq!(est.pairs, 0);
    assert_eq!(est.smoothness, 0.0);
}

#[test]
fn lipschitz_estimate_grows_with_probes() {
    let spec = NetworkSpec::mlp(2, &[4], 3, Head::LinearLogits).unwrap();
    let data = Batch::labeled(
        Matrix::from_vec(3, 2, vec![0.1, 2.0, -1.0, 0.5, 1.2, -0.3]).unwrap(),
        vec![0, 1, 2],
    )
    .unwrap();
    let center = ParamVector::init(&spec, 4);
    let mut prev = 0.0;
    for probes in 2..12 {
        let est =
            estimate_constants(&spec, &LossSpec::cross_entropy(), &center, &data, probes, 0.5, 9)
                .unwrap();
        assert!(est.lipschitz >= prev);
        prev = est.lipschitz;
    }
}

proptest! {
    #[test]
    fn components_sum_and_stay_non_negative(
        l in 0.0f64..5.0, g in 0.01f64..5.0, c in 0.01f64..5.0, t in 1.0f64..1000.0,
        lo in 0.01f64..5.0, n in 2usize..100_000, m in 2usize..100_000, delta in 0.001f64..1.0,
    ) {
        let k = StabilityConstants {
            inner: SgmConstants::new(l, g, c, t),
            outer: SgmConstants::new(lo, g, c, t),
            loss_bound: 1.0,
            delta,
        };
        let e = theorem2_bound_emp(&k, n, m, delta).unwrap();
        let q = theorem2_bound_q(&k, n, delta).unwrap();
        for r in [e, q] {
            prop_assert!(r.value.is_finite());
            prop_assert!(r.stability_term >= 0.0 && r.concentration_term >= 0.0 && r.inner_term >= 0.0);
            let sum = r.stability_term + r.concentration_term + r.inner_term;
            prop_assert!((r.value - sum).abs() <= 1e-12 * r.value.max(1.0));
        }
        prop_assert!(e.value >= q.value);
    }

    #[test]
    fn q_bound_is_maurer_without_inner_term(
        beta in 0.0f64..10.0, n in 1usize..10_000, big_m in 0.0f64..10.0, delta in 0.001f64..1.0,
    ) {
        let q = q_bound(beta, n, big_m, delta).unwrap();
        let m = maurer_bound(beta, 0.0, n, big_m, delta).unwrap();
        prop_assert_eq!(q.value, m.value);
    }

    #[test]
    fn inner_term_is_twice_beta_regardless_of_n(beta in 0.0f64..10.0, n in 1usize..10_000) {
        let r = maurer_bound(0.3, beta, n, 1.0, 0.1).unwrap();
        prop_assert_eq!(r.inner_term, 2.0 * beta);
    }
}
