//! Oracle-backed checks shared by the `oracle-check` command and the test
//! suites. Every check becomes one [`CheckRow`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::baseline::BaselineNet;
use crate::data::Cases;
use crate::error::Result;
use crate::estimators::{theta_coefficients, Estimator};
use crate::math::relative_error;
use crate::objective::{local_signals, MeanKind};
use crate::optim::Adam;
use crate::oracle::toys::{random_instance, suite, ToyInstance, ToyKind};
use crate::oracle::{
    analytic_bound_grad, bound_grad_cross_check, enumerate, estimator_moments, exact_bound_from, exact_log_likelihood,
    posterior_score_grad, Budget, TupleOrder,
};
use crate::rng::{Rng, RngTree};
use crate::sbn::{LatentStack, NetGrad, Proposal, SbnSystem};
use crate::train::eval_nll;

pub const UNBIASED_TOL: f64 = 1e-6;
pub const CROSS_CHECK_TOL: f64 = crate::oracle::CROSS_CHECK_TOL;
pub const ORDER_SLACK: f64 = 1e-9;
pub const NLL_TOL: f64 = 0.01;
pub const FD_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub pass: bool,
}

impl CheckRow {
    /// Scalar comparison passing when `|actual − expected| ≤ tol`.
    pub fn close(name: impl Into<String>, expected: f64, actual: f64, tol: f64) -> Self {
        let abs_err = (actual - expected).abs();
        Self {
            name: name.into(),
            expected,
            actual,
            abs_err,
            rel_err: abs_err / expected.abs().max(1e-300),
            pass: abs_err <= tol,
        }
    }

    /// Vector comparison passing when the relative error is at most `tol`.
    /// `expected`/`actual` report the two norms.
    pub fn vector(name: impl Into<String>, expected: &[f64], actual: &[f64], tol: f64) -> Self {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = actual.iter().zip(expected).map(|(a, b)| a - b).collect();
        let rel_err = relative_error(actual, expected);
        Self {
            name: name.into(),
            expected: norm(expected),
            actual: norm(actual),
            abs_err: norm(&diff),
            rel_err,
            pass: rel_err <= tol,
        }
    }

    /// `actual ≥ expected` with the given slack.
    pub fn at_least(name: impl Into<String>, expected: f64, actual: f64, slack: f64) -> Self {
        let abs_err = (actual - expected).abs();
        Self {
            name: name.into(),
            expected,
            actual,
            abs_err,
            rel_err: abs_err / expected.abs().max(1e-300),
            pass: actual - expected >= -slack,
        }
    }

    /// A count reaching `needed`.
    pub fn count(name: impl Into<String>, needed: usize, got: usize) -> Self {
        Self::at_least(name, needed as f64, got as f64, 0.0)
    }
}

pub const REPORT_HEADER: &str = "name,expected,actual,abs_err,rel_err,pass";

pub fn report_csv(rows: &[CheckRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{}",
            r.name, r.expected, r.actual, r.abs_err, r.rel_err, r.pass
        );
    }
    out
}

pub fn all_pass(rows: &[CheckRow]) -> bool {
    rows.iter().all(|r| r.pass)
}

/// Tuple means of the unbiased estimators against the exact bound gradient.
pub fn unbiasedness(instances: &[ToyInstance], ks: &[usize], budget: &Budget) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for t in instances {
        let e = enumerate(&t.system, &t.x, t.context(), budget)?;
        for &k in ks {
            let exact = analytic_bound_grad(&e, k, budget, TupleOrder::Forward)?;
            let lk = exact_bound_from(&e, k, budget)?;
            let estimators = [
                ("vimco", Estimator::Vimco(MeanKind::Geometric)),
                ("vimco-arith", Estimator::Vimco(MeanKind::Arithmetic)),
                ("naive", Estimator::Naive),
                ("nvil", Estimator::nvil(0.7 * lk, -0.4)),
            ];
            for (i, (name, est)) in estimators.iter().enumerate() {
                let m = estimator_moments(&e, k, est, budget)?;
                rows.push(CheckRow::vector(
                    format!("unbiased/{name}/theta/K{k}/{}", t.name),
                    &exact.theta,
                    &m.theta_mean,
                    UNBIASED_TOL,
                ));
                if i == 0 {
                    rows.push(CheckRow::vector(
                        format!("unbiased/model/psi/K{k}/{}", t.name),
                        &exact.psi,
                        &m.psi_mean,
                        UNBIASED_TOL,
                    ));
                }
            }
        }
    }
    Ok(rows)
}

/// Analytic bound gradient against central differences of the exact bound.
pub fn gradient_cross_checks(instances: &[ToyInstance], ks: &[usize], budget: &Budget) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for t in instances {
        for &k in ks {
            let c = bound_grad_cross_check(&t.system, &t.x, t.context(), k, budget)?;
            rows.push(CheckRow::vector(
                format!("cross-check/K{k}/{}", t.name),
                &c.finite_difference.joined(),
                &c.analytic.joined(),
                CROSS_CHECK_TOL,
            ));
        }
    }
    Ok(rows)
}

/// `ELBO = L^1 ≤ L^2 ≤ … ≤ L^max_k ≤ log P(x)`.
pub fn bound_ordering(instances: &[ToyInstance], max_k: usize, budget: &Budget) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for t in instances {
        let e = enumerate(&t.system, &t.x, t.context(), budget)?;
        let elbo: f64 = e.log_q.iter().zip(&e.log_f).map(|(q, f)| q.exp() * f).sum();
        let lpx = e.log_likelihood()?;
        let mut prev = exact_bound_from(&e, 1, budget)?;
        rows.push(CheckRow::close(format!("order/elbo=L1/{}", t.name), elbo, prev, ORDER_SLACK));
        for k in 2..=max_k {
            let lk = exact_bound_from(&e, k, budget)?;
            rows.push(CheckRow::at_least(format!("order/L{k}>=L{}/{}", k - 1, t.name), prev, lk, ORDER_SLACK));
            prev = lk;
        }
        rows.push(CheckRow::at_least(format!("order/logp>=L{max_k}/{}", t.name), prev, lpx, ORDER_SLACK));
    }
    Ok(rows)
}

/// With the exact posterior as proposal every bound equals `log P(x)`.
pub fn exact_posterior_bounds(seeds: &[u64], max_k: usize, budget: &Budget) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let t = crate::oracle::toys::exact_posterior_instance(seed, 3, 2)?;
        let e = enumerate(&t.system, &t.x, None, budget)?;
        let lpx = e.log_likelihood()?;
        for k in 1..=max_k {
            rows.push(CheckRow::close(
                format!("posterior/L{k}=logp/{}", t.name),
                lpx,
                exact_bound_from(&e, k, budget)?,
                ORDER_SLACK,
            ));
        }
    }
    Ok(rows)
}

/// Summed exact θ-variance of VIMCO and the naive estimator at `k`, per instance.
pub fn variance_pairs(instances: &[ToyInstance], k: usize, budget: &Budget) -> Result<Vec<(String, f64, f64)>> {
    instances
        .iter()
        .map(|t| {
            let e = enumerate(&t.system, &t.x, t.context(), budget)?;
            let v = estimator_moments(&e, k, &Estimator::Vimco(MeanKind::Geometric), budget)?;
            let n = estimator_moments(&e, k, &Estimator::Naive, budget)?;
            Ok((t.name.clone(), v.summed_theta_variance(), n.summed_theta_variance()))
        })
        .collect()
}

/// Bias of the wake update's tuple mean at one K.
#[derive(Clone, Debug, PartialEq)]
pub struct WakeBias {
    pub name: String,
    pub k: usize,
    /// Relative gap to the exact `∂L^K/∂θ`.
    pub bound_gap: f64,
    /// Relative gap to `Σ_h P(h|x) ∂log Q(h|x)/∂θ`, the posterior-matching
    /// direction the wake update estimates by self-normalized importance
    /// sampling.
    pub target_gap: f64,
}

pub fn wake_bias(instances: &[ToyInstance], ks: &[usize], budget: &Budget) -> Result<Vec<WakeBias>> {
    let mut out = Vec::new();
    for t in instances {
        if t.system.mode() != crate::sbn::ScoringMode::LearnedProposal {
            continue;
        }
        let e = enumerate(&t.system, &t.x, t.context(), budget)?;
        let target = posterior_score_grad(&e)?;
        for &k in ks {
            let exact = analytic_bound_grad(&e, k, budget, TupleOrder::Forward)?;
            let m = estimator_moments(&e, k, &Estimator::RwsWake, budget)?;
            out.push(WakeBias {
                name: t.name.clone(),
                k,
                bound_gap: relative_error(&m.theta_mean, &exact.theta),
                target_gap: relative_error(&m.theta_mean, &target),
            });
        }
    }
    Ok(out)
}

/// Learned-proposal instances small enough for `K = 8` tuples.
pub fn wake_instances(seed: u64, n: usize) -> Result<Vec<ToyInstance>> {
    let tree = RngTree::new(seed);
    (0..n)
        .map(|i| {
            let mut r = tree.stream(&[i as u64]);
            let (kind, shape): (ToyKind, &[usize]) = match i % 3 {
                0 => (ToyKind::Generative, &[2]),
                1 => (ToyKind::SopLearned, &[2]),
                _ => (ToyKind::Generative, &[1, 1]),
            };
            let ctx = if kind == ToyKind::Generative { 0 } else { r.gen_range(1..=2) };
            let obs = r.gen_range(3..=6);
            random_instance(tree.child(&[i as u64]).seed(), kind, shape, obs, ctx, 1.0)
        })
        .collect()
}

/// A split of `n` cases drawn from the instance's model, with contexts drawn
/// uniformly for conditional models.
pub fn sampled_cases(t: &ToyInstance, n: usize, seed: u64) -> Result<Cases> {
    let dims = t.system.dims().clone();
    let tree = RngTree::new(seed);
    let mut obs = Array2::zeros((n, dims.observation));
    let mut ctx = dims.is_conditional().then(|| Array2::zeros((n, dims.context)));
    for i in 0..n {
        let mut rng = tree.stream(&[i as u64]);
        let c: Option<Vec<f64>> = ctx
            .as_ref()
            .map(|_| (0..dims.context).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect());
        let (_, x) = t.system.model.sample_joint(&mut rng, c.as_deref())?;
        obs.row_mut(i).assign(&x);
        if let (Some(m), Some(c)) = (ctx.as_mut(), c) {
            m.row_mut(i).assign(&ndarray::Array1::from(c));
        }
    }
    Ok(Cases {
        observations: obs,
        contexts: ctx,
    })
}

/// Exact mean negative log-likelihood of a split.
pub fn exact_nll(system: &SbnSystem, cases: &Cases, budget: &Budget) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..cases.len() {
        let x = cases.observations.row(i).to_vec();
        let c = cases.contexts.as_ref().map(|m| m.row(i).to_vec());
        total -= exact_log_likelihood(&system.model, &x, c.as_deref(), budget)?;
    }
    Ok(total / cases.len() as f64)
}

/// Fits a learned proposal to the exact posteriors of `cases` by full-batch
/// Adam on the mean of `Σ_h P(h|x) log Q(h|x)`, the regime `eval_nll` is used
/// in after training. Prior-proposal systems are returned unchanged.
pub fn fit_proposal(system: &SbnSystem, cases: &Cases, steps: usize, lr: f64, budget: &Budget) -> Result<SbnSystem> {
    let mut fitted = system.clone();
    if !matches!(fitted.proposal, Proposal::Learned(_)) {
        return Ok(fitted);
    }
    // Binary cases repeat, so each distinct one is enumerated once per step.
    let mut distinct: BTreeMap<(Vec<u8>, Vec<u8>), usize> = BTreeMap::new();
    for i in 0..cases.len() {
        let bits = |v: ndarray::ArrayView1<f64>| v.iter().map(|&b| b as u8).collect::<Vec<u8>>();
        let c = cases.contexts.as_ref().map(|m| bits(m.row(i))).unwrap_or_default();
        *distinct.entry((bits(cases.observations.row(i)), c)).or_default() += 1;
    }
    let as_f64 = |v: &[u8]| v.iter().map(|&b| b as f64).collect::<Vec<f64>>();
    let mut params = fitted.theta_net().params_flat();
    let mut adam = Adam::new(&[params.len()]);
    for _ in 0..steps {
        let mut grad = vec![0.0; params.len()];
        for ((x, c), &n) in &distinct {
            let c = (!c.is_empty()).then(|| as_f64(c));
            let e = enumerate(&fitted, &as_f64(x), c.as_deref(), budget)?;
            let weight = n as f64 / cases.len() as f64;
            for (g, v) in grad.iter_mut().zip(posterior_score_grad(&e)?) {
                *g += weight * v;
            }
        }
        adam.ascend(&mut [&mut params], &[&grad], lr)?;
        fitted.theta_net_mut().set_params_flat(&params)?;
    }
    Ok(fitted)
}

/// `eval_nll` at `samples` against the exact split NLL, with each proposal
/// first fitted to the split's posteriors.
pub fn nll_accuracy(instances: &[ToyInstance], cases: usize, samples: usize, budget: &Budget) -> Result<Vec<CheckRow>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let split = sampled_cases(t, cases, 100 + i as u64)?;
            let exact = exact_nll(&t.system, &split, budget)?;
            let fitted = fit_proposal(&t.system, &split, 200, 0.05, budget)?;
            let est = eval_nll(&fitted, &split, samples, &RngTree::new(7 + i as u64))?;
            Ok(CheckRow::close(format!("nll/S{samples}/{}", t.name), exact, est, NLL_TOL))
        })
        .collect()
}

/// Mean `eval_nll` over `seeds` paired generator trees for each sample count.
pub fn nll_by_samples(t: &ToyInstance, split: &Cases, samples: &[usize], seeds: u64) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|&s| {
            let mut total = 0.0;
            for seed in 0..seeds {
                total += eval_nll(&t.system, split, s, &RngTree::new(seed))?;
            }
            Ok(total / seeds as f64)
        })
        .collect()
}

fn random_state(t: &ToyInstance, rng: &mut Rng) -> LatentStack {
    let sizes = &t.system.dims().latent;
    let bits = t.system.dims().total_latent_bits();
    LatentStack::from_index(rng.gen_range(0..1u64 << bits), sizes)
}

fn perturb_all(system: &mut SbnSystem, rng: &mut Rng) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for s in system.model.net_mut().param_slices_mut() {
        s.iter_mut().for_each(|v| *v = normal.sample(rng));
    }
    if let Proposal::Learned(q) = &mut system.proposal {
        for s in q.net_mut().param_slices_mut() {
            s.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
    }
}

fn fd_gradient(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = crate::oracle::FD_STEP;
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + h;
            let up = f(&p);
            p[i] = params[i] - h;
            let down = f(&p);
            p[i] = params[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Analytic gradients of `log P(x, h)`, `log Q(h|x)` and the baseline-net
/// loss against central differences at `points` random parameter settings.
pub fn finite_difference_checks(seed: u64, points: usize) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let tree = RngTree::new(seed);
    let kinds = [ToyKind::Generative, ToyKind::SopLearned];
    let shapes: [&[usize]; 3] = [&[3], &[2, 3], &[4, 2, 2]];
    for p in 0..points {
        let mut rng = tree.stream(&[p as u64]);
        let kind = kinds[p % 2];
        let mut t = random_instance(tree.child(&[p as u64]).seed(), kind, shapes[p % 3], 5, 3, 1.0)?;
        perturb_all(&mut t.system, &mut rng);
        let h = random_state(&t, &mut rng);
        let ctx = t.context.clone();

        let model = t.system.model.clone();
        let g = model.grad_log_joint(&t.x, &h, ctx.as_deref())?;
        let fd = fd_gradient(&model.net().params_flat(), |flat| {
            let mut m = model.clone();
            m.net_mut().set_params_flat(flat).expect("same length");
            m.log_joint(&t.x, &h, ctx.as_deref()).expect("valid")
        });
        rows.push(CheckRow::vector(format!("fd/log_joint/p{p}"), &fd, &g.flatten(), FD_TOL));

        if let Proposal::Learned(q) = &t.system.proposal {
            let mut q = q.clone();
            let obs_mean = ndarray::Array1::from_shape_fn(t.x.len(), |_| rng.gen::<f64>());
            let ctx_mean = ctx.as_ref().map(|c| ndarray::Array1::from_shape_fn(c.len(), |_| rng.gen::<f64>()));
            q.set_input_centering(Some(obs_mean), ctx_mean)?;
            let g: NetGrad = q.grad_log_q(&t.x, &h, ctx.as_deref())?;
            let fd = fd_gradient(&q.net().params_flat(), |flat| {
                let mut qq = q.clone();
                qq.net_mut().set_params_flat(flat).expect("same length");
                qq.log_q(&t.x, &h, ctx.as_deref()).expect("valid")
            });
            rows.push(CheckRow::vector(format!("fd/log_q/p{p}"), &fd, &g.flatten(), FD_TOL));
        }

        let inputs = 4 + p % 5;
        let mut net = BaselineNet::new(inputs, 6, &mut rng);
        let normal = Normal::new(0.0, 0.7).expect("valid");
        for s in net.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        let xs = Array2::from_shape_fn((5, inputs), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let targets = ndarray::Array1::from_shape_fn(5, |_| normal.sample(&mut rng) * 3.0);
        let (_, g) = net.squared_residual_grad(xs.view(), targets.view())?;
        let flat: Vec<f64> = net.param_slices().concat();
        let lens: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        let fd = fd_gradient(&flat, |f| {
            let mut n = net.clone();
            let mut off = 0;
            for (s, len) in n.param_slices_mut().into_iter().zip(&lens) {
                s.copy_from_slice(&f[off..off + len]);
                off += len;
            }
            n.squared_residual_grad(xs.view(), targets.view()).expect("valid").0
        });
        rows.push(CheckRow::vector(format!("fd/baseline/p{p}"), &fd, &g.concat(), FD_TOL));
    }
    Ok(rows)
}

/// Equal scores give exactly-zero local signals, and one-sample VIMCO is refused.
pub fn degenerate_vimco() -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for (k, v) in [(2, -3.5), (5, 0.0), (10, -731.25), (7, 1e-3)] {
        let l = vec![v; k];
        for (name, mean) in [("geometric", MeanKind::Geometric), ("arithmetic", MeanKind::Arithmetic)] {
            let worst = local_signals(&l, mean)
                .map(|s| s.iter().fold(0.0f64, |m, x| m.max(x.abs())))
                .unwrap_or(f64::INFINITY);
            rows.push(CheckRow::close(format!("degenerate/equal/{name}/K{k}"), 0.0, worst, 0.0));
        }
    }
    let refused = theta_coefficients(&Estimator::Vimco(MeanKind::Geometric), &[-1.0]).is_err() as u8 as f64;
    rows.push(CheckRow::close("degenerate/K1-rejected", 1.0, refused, 0.0));
    rows
}

/// What `oracle-check` runs.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    pub max_latent_bits: usize,
    pub ks: Vec<usize>,
    pub budget: Budget,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            max_latent_bits: 3,
            ks: vec![2, 3, 5],
            budget: Budget::default(),
        }
    }
}

/// The full oracle suite: unbiasedness, cross-checks, bound ordering,
/// exact-posterior bounds, variance ranking, wake bias, NLL accuracy,
/// gradient checks and degenerate cases.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let instances = suite(cfg.seed, cfg.instances, cfg.max_latent_bits)?;
    let b = &cfg.budget;
    let mut rows = unbiasedness(&instances, &cfg.ks, b)?;
    rows.extend(gradient_cross_checks(&instances, &cfg.ks, b)?);
    rows.extend(bound_ordering(&instances, 4, b)?);
    rows.extend(exact_posterior_bounds(&[cfg.seed, cfg.seed + 1, cfg.seed + 2], 4, b)?);

    let pairs = variance_pairs(&instances, 5, b)?;
    let lower = pairs.iter().filter(|(_, v, n)| v < n).count();
    rows.push(CheckRow::count("variance/vimco<naive/K5", (pairs.len() * 9).div_ceil(10), lower));

    let wake = wake_bias(&wake_instances(cfg.seed, cfg.instances)?, &[2, 8], b)?;
    let (k2, k8): (Vec<_>, Vec<_>) = wake.iter().partition(|w| w.k == 2);
    let need = (k2.len() * 3).div_ceil(4);
    rows.push(CheckRow::count(
        "wake/biased/K2",
        need,
        k2.iter().filter(|w| w.bound_gap > 1e-3).count(),
    ));
    rows.push(CheckRow::count(
        "wake/bias-shrinks/K8<K2",
        need,
        k2.iter().zip(&k8).filter(|(a, b)| b.target_gap < a.target_gap).count(),
    ));

    let few: Vec<ToyInstance> = instances.iter().take(5).cloned().collect();
    rows.extend(nll_accuracy(&few, 200, 4096, b)?);
    rows.extend(finite_difference_checks(cfg.seed, 50)?);
    rows.extend(degenerate_vimco());
    Ok(rows)
}
