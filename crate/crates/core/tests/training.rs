use vimco_core::data::{toy_bars, Cases, Dataset};
use vimco_core::estimators::EstimatorKind;
use vimco_core::math::log_sum_exp;
use vimco_core::oracle::toys::suite;
use vimco_core::oracle::{exact_log_likelihood, Budget};
use vimco_core::rng::{tags, Rng, RngTree};
use vimco_core::train::{eval_bound, eval_nll, eval_nll_per_case, train, TaskData, TaskMode, TrainConfig};
use vimco_core::verify::{exact_nll, nll_by_samples, sampled_cases};

fn bars(cases: usize) -> Dataset {
    let imgs = toy_bars(4, cases + 20, 0.02, 9);
    Dataset::from_images(imgs, 4, 4, [cases, 10, 10]).unwrap()
}

#[test]
fn vimco_smoke_run_improves_steadily() {
    let data = TaskData::new(&bars(16), TaskMode::Generative).unwrap();
    let cfg = TrainConfig {
        k: 5,
        latent: vec![8],
        epochs: 200,
        batch_size: 16,
        lr: 1e-2,
        log_every: 1,
        eval_every: 0,
        ..Default::default()
    };
    let out = train(&cfg, &data, None).unwrap();
    assert_eq!(out.steps, 200);
    let trace: Vec<f64> = out.metric("train", "bound").iter().map(|v| v.1).collect();
    let windows: Vec<f64> = trace.chunks(40).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] > w[0], "{windows:?}");
    }
}

#[test]
fn single_sample_nvil_and_wake_sleep_train() {
    let ds = bars(60);
    for (mode, est, k, sleep) in [
        (TaskMode::Generative, EstimatorKind::Nvil, 1, false),
        (TaskMode::SopPrior, EstimatorKind::Nvil, 1, false),
        (TaskMode::Generative, EstimatorKind::RwsWake, 4, true),
        (TaskMode::SopLearned, EstimatorKind::RwsSleep, 4, false),
    ] {
        let data = TaskData::new(&ds, mode).unwrap();
        let cfg = TrainConfig {
            estimator: est,
            k,
            mode,
            sleep,
            latent: vec![5],
            epochs: 30,
            batch_size: 10,
            lr: 1e-2,
            log_every: 1,
            eval_every: 0,
            ..Default::default()
        };
        let out = train(&cfg, &data, None).unwrap();
        let tr: Vec<f64> = out.metric("train", "bound").iter().map(|v| v.1).collect();
        let head = tr[..20].iter().sum::<f64>() / 20.0;
        let tail = tr[tr.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail > head, "{mode:?} {est:?}: {head} -> {tail}");
    }
}

#[test]
fn max_steps_stops_mid_epoch_and_still_evaluates() {
    let data = TaskData::new(&bars(60), TaskMode::Generative).unwrap();
    let cfg = TrainConfig {
        latent: vec![3],
        epochs: 5,
        batch_size: 7,
        max_steps: Some(4),
        ..Default::default()
    };
    let out = train(&cfg, &data, None).unwrap();
    assert_eq!(out.steps, 4);
    assert_eq!(out.best.unwrap().1, 4);
}

fn instance_split(i: usize, n: usize) -> (vimco_core::oracle::toys::ToyInstance, Cases) {
    let t = suite(21, 6, 3).unwrap().swap_remove(i);
    let split = sampled_cases(&t, n, 5).unwrap();
    (t, split)
}

#[test]
fn nll_estimate_converges_to_the_exact_value() {
    for i in 0..3 {
        let (t, split) = instance_split(i, 150);
        let exact = exact_nll(&t.system, &split, &Budget::default()).unwrap();
        let est = eval_nll(&t.system, &split, 4096, &RngTree::new(1)).unwrap();
        assert!((est - exact).abs() < 0.01, "{}: {est} vs {exact}", t.name);
    }
}

#[test]
fn nll_estimate_falls_with_more_samples() {
    for i in 0..3 {
        let (t, split) = instance_split(i, 300);
        let v = nll_by_samples(&t, &split, &[1, 2, 4, 8, 16, 32], 3).unwrap();
        for w in v.windows(2) {
            assert!(w[1] <= w[0], "{}: {v:?}", t.name);
        }
    }
}

#[test]
fn one_sample_nll_is_a_negative_elbo_draw() {
    let (t, split) = instance_split(0, 20);
    let tree = RngTree::new(3);
    let per_case = eval_nll_per_case(&t.system, &split, 1, &tree).unwrap();
    for (i, v) in per_case.iter().enumerate() {
        let mut rng: Rng = tree.stream(&[tags::EVAL, u64::MAX, i as u64]);
        let x = split.observations.row(i).to_vec();
        let c = split.contexts.as_ref().map(|m| m.row(i).to_vec());
        let (h, _) = t.system.sample_proposal(&x, &mut rng, c.as_deref()).unwrap();
        let lf = t.system.log_f(&x, &h, c.as_deref()).unwrap();
        assert!((v + lf).abs() < 1e-12);
    }
}

#[test]
fn bounds_rise_with_k_on_average() {
    for i in 0..3 {
        let (t, split) = instance_split(i, 200);
        let lpx = -exact_nll(&t.system, &split, &Budget::default()).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in [1, 2, 4, 8] {
            let b = eval_bound(&t.system, &split, k, 3, &RngTree::new(8)).unwrap();
            assert!(b > prev, "{}: K = {k}", t.name);
            prev = b;
        }
        assert!(prev < lpx + 0.05);
    }
}

#[test]
fn exact_likelihood_matches_direct_sum() {
    let t = &suite(2, 3, 3).unwrap()[0];
    assert_eq!(t.system.mode(), vimco_core::sbn::ScoringMode::LearnedProposal);
    let bits = t.system.dims().total_latent_bits();
    let joint: Vec<f64> = (0..1u64 << bits)
        .map(|i| {
            let h = vimco_core::sbn::LatentStack::from_index(i, &t.system.dims().latent);
            t.system.model.log_joint(&t.x, &h, t.context()).unwrap()
        })
        .collect();
    let direct = log_sum_exp(&joint).unwrap();
    let lpx = exact_log_likelihood(&t.system.model, &t.x, t.context(), &Budget::default()).unwrap();
    assert!((direct - lpx).abs() < 1e-12);
}
