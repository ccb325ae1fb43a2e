use proptest::prelude::*;

use vimco_core::estimators::Estimator;
use vimco_core::math::relative_error;
use vimco_core::objective::MeanKind;
use vimco_core::oracle::toys::{random_instance, ToyKind};
use vimco_core::oracle::{
    analytic_bound_grad, enumerate, estimator_moments, exact_bound_from, exact_log_likelihood, Budget, TupleOrder,
};

fn kind_of(i: u8) -> ToyKind {
    [ToyKind::Generative, ToyKind::SopLearned, ToyKind::SopPrior][i as usize % 3]
}

fn shape_of(i: u8) -> &'static [usize] {
    [&[1][..], &[2], &[3], &[2, 1], &[1, 2]][i as usize % 5]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bounds_increase_with_k_up_to_the_likelihood(seed in 0u64..10_000, kind in 0u8..3, shape in 0u8..5, obs in 1usize..5, scale in 0.2f64..2.5) {
        let t = random_instance(seed, kind_of(kind), shape_of(shape), obs, 2, scale).unwrap();
        let b = Budget::default();
        let e = enumerate(&t.system, &t.x, t.context(), &b).unwrap();
        let lpx = exact_log_likelihood(&t.system.model, &t.x, t.context(), &b).unwrap();
        prop_assert!((lpx - e.log_likelihood().unwrap()).abs() < 1e-12);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=4 {
            let lk = exact_bound_from(&e, k, &b).unwrap();
            prop_assert!(lk >= prev - 1e-9, "L{} = {} < {}", k, lk, prev);
            prev = lk;
        }
        prop_assert!(lpx >= prev - 1e-9);
    }

    #[test]
    fn score_function_estimators_are_unbiased(seed in 0u64..10_000, kind in 0u8..3, shape in 0u8..5, k in 2usize..4, c in -5.0f64..5.0, input in -5.0f64..5.0) {
        let t = random_instance(seed, kind_of(kind), shape_of(shape), 3, 1, 1.0).unwrap();
        let b = Budget::default();
        let e = enumerate(&t.system, &t.x, t.context(), &b).unwrap();
        let exact = analytic_bound_grad(&e, k, &b, TupleOrder::Forward).unwrap();
        for est in [
            Estimator::Naive,
            Estimator::nvil(c, input),
            Estimator::Vimco(MeanKind::Geometric),
            Estimator::Vimco(MeanKind::Arithmetic),
            Estimator::Vimco(MeanKind::Predicted(c)),
        ] {
            let m = estimator_moments(&e, k, &est, &b).unwrap();
            prop_assert!(relative_error(&m.theta_mean, &exact.theta) < 1e-8, "{:?}", est);
            prop_assert!(relative_error(&m.psi_mean, &exact.psi) < 1e-8);
        }
    }

    #[test]
    fn tuple_order_is_irrelevant(seed in 0u64..10_000, kind in 0u8..3, k in 1usize..4) {
        let t = random_instance(seed, kind_of(kind), &[2, 1], 3, 1, 1.5).unwrap();
        let b = Budget::default();
        let e = enumerate(&t.system, &t.x, t.context(), &b).unwrap();
        let f = analytic_bound_grad(&e, k, &b, TupleOrder::Forward).unwrap();
        let r = analytic_bound_grad(&e, k, &b, TupleOrder::Reverse).unwrap();
        for (a, c) in f.joined().iter().zip(r.joined()) {
            prop_assert!((a - c).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }
}

#[test]
fn good_baselines_reduce_variance() {
    let b = Budget::default();
    for seed in 0..10 {
        let t = random_instance(seed, ToyKind::Generative, &[3], 4, 0, 1.0).unwrap();
        let e = enumerate(&t.system, &t.x, None, &b).unwrap();
        for k in [1, 3] {
            let lk = exact_bound_from(&e, k, &b).unwrap();
            let naive = estimator_moments(&e, k, &Estimator::Naive, &b).unwrap();
            let nvil = estimator_moments(&e, k, &Estimator::nvil(lk, 0.0), &b).unwrap();
            assert!(nvil.summed_theta_variance() <= naive.summed_theta_variance());
        }
    }
}

#[test]
fn wake_update_is_biased_for_the_bound() {
    let b = Budget::default();
    let mut biased = 0;
    for seed in 0..10 {
        let t = random_instance(seed, ToyKind::Generative, &[2], 4, 0, 1.0).unwrap();
        let e = enumerate(&t.system, &t.x, None, &b).unwrap();
        let exact = analytic_bound_grad(&e, 2, &b, TupleOrder::Forward).unwrap();
        let m = estimator_moments(&e, 2, &Estimator::RwsWake, &b).unwrap();
        biased += (relative_error(&m.theta_mean, &exact.theta) > 1e-3) as usize;
    }
    assert!(biased >= 9);
}
