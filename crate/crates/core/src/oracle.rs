//! Brute-force ground truth for small models.
//!
//! Every latent configuration `h ∈ H` is enumerated once, and expectations
//! over sample tuples `(h^1, …, h^K) ∈ H^K` are exact sums weighted by
//! `Π_i Q(h^i|x)`. Tuple sums run in fixed-size chunks that are reduced in
//! chunk order, so results do not depend on the number of worker threads.

use std::ops::Range;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{theta_coefficients, Estimator};
use crate::math::{log_sum_exp, relative_error, softmax_from_logs};
use crate::sbn::{BernoulliNet, LatentStack, Proposal, SbnModel, SbnSystem, ScoringMode, Units};

const TUPLE_CHUNK: usize = 4096;

/// Finite-difference step used by the cross-check.
pub const FD_STEP: f64 = 1e-5;
/// Largest tolerated relative disagreement between the analytic and the
/// finite-difference bound gradient.
pub const CROSS_CHECK_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub max_configs: u64,
    pub max_tuples: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_configs: 1 << 20,
            max_tuples: 1_000_000,
        }
    }
}

impl Budget {
    fn configs(&self, bits: usize) -> Result<usize> {
        let n = 1u64.checked_shl(bits as u32).filter(|_| bits < 64);
        match n {
            Some(n) if n <= self.max_configs => Ok(n as usize),
            _ => Err(Error::Budget(format!(
                "2^{bits} latent configurations exceed the limit of {}",
                self.max_configs
            ))),
        }
    }

    fn tuples(&self, configs: usize, k: usize) -> Result<usize> {
        if k == 0 {
            return Err(Error::SampleCount {
                k,
                reason: "at least one sample is required",
            });
        }
        match (configs as u64).checked_pow(k as u32) {
            Some(n) if n <= self.max_tuples => Ok(n as usize),
            _ => Err(Error::Budget(format!(
                "{configs}^{k} sample tuples exceed the limit of {}",
                self.max_tuples
            ))),
        }
    }
}

/// `log P(x, h)` for every latent configuration, in [`LatentStack::from_index`] order.
pub fn log_joint_table(model: &SbnModel, x: &[f64], context: Option<&[f64]>, budget: &Budget) -> Result<Vec<f64>> {
    let dims = model.dims();
    let n = budget.configs(dims.total_latent_bits())?;
    if x.len() != dims.observation {
        return Err(Error::Shape("observation has the wrong length".into()));
    }
    let chunk = 4096.min(n);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let rows = chunk.min(n - start);
        let obs = Array2::from_shape_fn((rows, x.len()), |(_, j)| x[j]);
        let ctx = context.map(|c| Array2::from_shape_fn((rows, c.len()), |(_, j)| c[j]));
        let mut units = Units::for_sampling(dims, rows, ctx, Some(obs));
        for r in 0..rows {
            let h = LatentStack::from_index((start + r) as u64, &dims.latent);
            for (layer, bits) in units.latents.iter_mut().zip(&h.layers) {
                layer.row_mut(r).assign(bits);
            }
        }
        out.extend(model.net().log_prob(&units, model.net().all_layers())?);
        start += rows;
    }
    Ok(out)
}

/// `log P(x) = log Σ_h P(x, h)`
pub fn exact_log_likelihood(model: &SbnModel, x: &[f64], context: Option<&[f64]>, budget: &Budget) -> Result<f64> {
    log_sum_exp(&log_joint_table(model, x, context, budget)?)
}

/// Per-configuration scores and flattened score-function gradients.
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub mode: ScoringMode,
    pub latent_sizes: Vec<usize>,
    pub log_q: Vec<f64>,
    pub log_f: Vec<f64>,
    pub log_joint: Vec<f64>,
    /// `∂log Q(h|x)/∂θ`
    pub d_log_q: Vec<Vec<f64>>,
    /// `∂log f(x, h)/∂θ`
    pub d_log_f_theta: Vec<Vec<f64>>,
    /// `∂log f(x, h)/∂ψ`
    pub d_log_f_psi: Vec<Vec<f64>>,
}

impl Enumeration {
    pub fn configs(&self) -> usize {
        self.log_q.len()
    }

    pub fn theta_dim(&self) -> usize {
        self.d_log_q.first().map_or(0, Vec::len)
    }

    pub fn psi_dim(&self) -> usize {
        self.d_log_f_psi.first().map_or(0, Vec::len)
    }

    pub fn log_likelihood(&self) -> Result<f64> {
        log_sum_exp(&self.log_joint)
    }

    pub fn posterior(&self) -> Result<Vec<f64>> {
        softmax_from_logs(&self.log_joint)
    }
}

pub fn enumerate(system: &SbnSystem, x: &[f64], context: Option<&[f64]>, budget: &Budget) -> Result<Enumeration> {
    let sizes = system.dims().latent.clone();
    let n = budget.configs(system.dims().total_latent_bits())?;
    let mut e = Enumeration {
        mode: system.mode(),
        latent_sizes: sizes.clone(),
        log_q: Vec::with_capacity(n),
        log_f: Vec::with_capacity(n),
        log_joint: Vec::with_capacity(n),
        d_log_q: Vec::with_capacity(n),
        d_log_f_theta: Vec::with_capacity(n),
        d_log_f_psi: Vec::with_capacity(n),
    };
    for i in 0..n {
        let h = LatentStack::from_index(i as u64, &sizes);
        e.log_q.push(system.log_q(x, &h, context)?);
        e.log_f.push(system.log_f(x, &h, context)?);
        e.log_joint.push(system.model.log_joint(x, &h, context)?);
        e.d_log_q.push(system.grad_log_q(x, &h, context)?.flatten());
        e.d_log_f_theta.push(system.grad_log_f_theta(x, &h, context)?.flatten());
        e.d_log_f_psi.push(system.grad_log_f_psi(x, &h, context)?.flatten());
    }
    Ok(e)
}

/// Scores only; enough for [`exact_bound`].
fn enumerate_scores(system: &SbnSystem, x: &[f64], context: Option<&[f64]>, budget: &Budget) -> Result<(Vec<f64>, Vec<f64>)> {
    let sizes = &system.dims().latent;
    let n = budget.configs(system.dims().total_latent_bits())?;
    let mut log_q = Vec::with_capacity(n);
    let mut log_f = Vec::with_capacity(n);
    for i in 0..n {
        let h = LatentStack::from_index(i as u64, sizes);
        log_q.push(system.log_q(x, &h, context)?);
        log_f.push(system.log_f(x, &h, context)?);
    }
    Ok((log_q, log_f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TupleOrder {
    Forward,
    Reverse,
}

/// `Σ_tuples add(tuple, acc)` with `acc` of length `dim`, chunked and reduced
/// in a fixed order.
fn tuple_sum<F>(configs: usize, k: usize, total: usize, dim: usize, order: TupleOrder, add: F) -> Vec<f64>
where
    F: Fn(&[usize], &mut [f64]) + Sync,
{
    let chunks = total.div_ceil(TUPLE_CHUNK);
    let partial: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; dim];
            let mut tuple = vec![0usize; k];
            let range = c * TUPLE_CHUNK..((c + 1) * TUPLE_CHUNK).min(total);
            for t in range {
                let t = match order {
                    TupleOrder::Forward => t,
                    TupleOrder::Reverse => total - 1 - t,
                };
                let mut rest = t;
                for slot in tuple.iter_mut() {
                    *slot = rest % configs;
                    rest /= configs;
                }
                add(&tuple, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; dim];
    for p in partial {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn tuple_prob(log_q: &[f64], tuple: &[usize]) -> f64 {
    tuple.iter().map(|&i| log_q[i]).sum::<f64>().exp()
}

fn tuple_bound(log_f: &[f64], tuple: &[usize], scratch: &mut [f64]) -> f64 {
    for (s, &i) in scratch.iter_mut().zip(tuple) {
        *s = log_f[i];
    }
    log_sum_exp(scratch).expect("finite scores") - (tuple.len() as f64).ln()
}

fn bound_from_scores(log_q: &[f64], log_f: &[f64], k: usize, budget: &Budget, order: TupleOrder) -> Result<f64> {
    let total = budget.tuples(log_q.len(), k)?;
    Ok(tuple_sum(log_q.len(), k, total, 1, order, |t, acc| {
        let mut scratch = vec![0.0; k];
        acc[0] += tuple_prob(log_q, t) * tuple_bound(log_f, t, &mut scratch);
    })[0])
}

/// `L^K = E_{Q(h^{1:K}|x)}[log (1/K) Σ_i f(x, h^i)]`
pub fn exact_bound(system: &SbnSystem, x: &[f64], context: Option<&[f64]>, k: usize, budget: &Budget) -> Result<f64> {
    let (log_q, log_f) = enumerate_scores(system, x, context, budget)?;
    bound_from_scores(&log_q, &log_f, k, budget, TupleOrder::Forward)
}

pub fn exact_bound_from(e: &Enumeration, k: usize, budget: &Budget) -> Result<f64> {
    bound_from_scores(&e.log_q, &e.log_f, k, budget, TupleOrder::Forward)
}

/// Exact bound gradient, flattened like [`NetGrad::flatten`](crate::sbn::NetGrad::flatten)
/// of the θ-owning net and the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactGradient {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl ExactGradient {
    pub fn joined(&self) -> Vec<f64> {
        [self.theta.as_slice(), self.psi.as_slice()].concat()
    }
}

/// The tuple-weighted integrand
/// `Σ_j L̂ ∂log Q(h^j|x)/∂θ + Σ_j w̃^j ∂log f(x, h^j)/∂θ` (and
/// `Σ_j w̃^j ∂log f/∂ψ` for ψ), summed over all tuples.
pub fn analytic_bound_grad(e: &Enumeration, k: usize, budget: &Budget, order: TupleOrder) -> Result<ExactGradient> {
    let total = budget.tuples(e.configs(), k)?;
    let (tdim, pdim) = (e.theta_dim(), e.psi_dim());
    let flat = tuple_sum(e.configs(), k, total, tdim + pdim, order, |t, acc| {
        let p = tuple_prob(&e.log_q, t);
        let scores: Vec<f64> = t.iter().map(|&i| e.log_f[i]).collect();
        let lse = log_sum_exp(&scores).expect("finite scores");
        let lhat = lse - (k as f64).ln();
        let (theta, psi) = acc.split_at_mut(tdim);
        for (&i, &l) in t.iter().zip(&scores) {
            let w = (l - lse).exp();
            for ((a, dq), df) in theta.iter_mut().zip(&e.d_log_q[i]).zip(&e.d_log_f_theta[i]) {
                *a += p * (lhat * dq + w * df);
            }
            for (a, df) in psi.iter_mut().zip(&e.d_log_f_psi[i]) {
                *a += p * w * df;
            }
        }
    });
    Ok(ExactGradient {
        theta: flat[..tdim].to_vec(),
        psi: flat[tdim..].to_vec(),
    })
}

/// Flat parameter ranges owned by each layer of `net`.
fn layer_ranges(net: &BernoulliNet) -> Vec<Range<usize>> {
    let mut at = 0;
    net.layers()
        .iter()
        .map(|l| {
            let len = l.bias.len() + l.inputs.iter().map(|b| b.weight.len()).sum::<usize>();
            at += len;
            at - len..at
        })
        .collect()
}

fn coords(net: &BernoulliNet, layers: Range<usize>) -> Vec<usize> {
    layer_ranges(net)[layers].iter().flat_map(|r| r.clone()).collect()
}

/// Central differences of [`exact_bound`] in every θ and ψ coordinate.
pub fn finite_difference_bound_grad(
    system: &SbnSystem,
    x: &[f64],
    context: Option<&[f64]>,
    k: usize,
    budget: &Budget,
) -> Result<ExactGradient> {
    let eval = |s: &SbnSystem| exact_bound(s, x, context, k, budget);
    let diff = |coord: usize, theta_side: bool| -> Result<f64> {
        let mut plus = system.clone();
        let mut minus = system.clone();
        let bump = |s: &mut SbnSystem, d: f64| {
            let net = if theta_side { s.theta_net_mut() } else { s.model.net_mut() };
            let mut flat = net.params_flat();
            flat[coord] += d;
            net.set_params_flat(&flat).expect("same length");
        };
        bump(&mut plus, FD_STEP);
        bump(&mut minus, -FD_STEP);
        Ok((eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP))
    };
    let mut theta = vec![0.0; system.theta_net().param_count()];
    for c in coords(system.theta_net(), system.theta_layers()) {
        theta[c] = diff(c, true)?;
    }
    let mut psi = vec![0.0; system.model.net().param_count()];
    for c in coords(system.model.net(), system.psi_layers()) {
        psi[c] = diff(c, false)?;
    }
    Ok(ExactGradient { theta, psi })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCrossCheck {
    pub analytic: ExactGradient,
    pub finite_difference: ExactGradient,
    pub rel_err_theta: f64,
    pub rel_err_psi: f64,
}

impl GradCrossCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err_theta.max(self.rel_err_psi)
    }
}

pub fn bound_grad_cross_check(
    system: &SbnSystem,
    x: &[f64],
    context: Option<&[f64]>,
    k: usize,
    budget: &Budget,
) -> Result<GradCrossCheck> {
    let e = enumerate(system, x, context, budget)?;
    let analytic = analytic_bound_grad(&e, k, budget, TupleOrder::Forward)?;
    let finite_difference = finite_difference_bound_grad(system, x, context, k, budget)?;
    Ok(GradCrossCheck {
        rel_err_theta: relative_error(&analytic.theta, &finite_difference.theta),
        rel_err_psi: relative_error(&analytic.psi, &finite_difference.psi),
        analytic,
        finite_difference,
    })
}

/// `∂L^K/∂θ` and `∂L^K/∂ψ`, computed from the tuple integrand and verified
/// against finite differences.
pub fn exact_bound_grad(
    system: &SbnSystem,
    x: &[f64],
    context: Option<&[f64]>,
    k: usize,
    budget: &Budget,
) -> Result<ExactGradient> {
    let check = bound_grad_cross_check(system, x, context, k, budget)?;
    if check.max_rel_err() > CROSS_CHECK_TOL {
        return Err(Error::CrossCheck(format!(
            "analytic and finite-difference bound gradients disagree (θ {:.3e}, ψ {:.3e})",
            check.rel_err_theta, check.rel_err_psi
        )));
    }
    Ok(check.analytic)
}

/// Exact per-coordinate mean and variance of an estimator over the tuple
/// distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub theta_mean: Vec<f64>,
    pub theta_var: Vec<f64>,
    pub psi_mean: Vec<f64>,
    pub psi_var: Vec<f64>,
}

impl Moments {
    pub fn summed_theta_variance(&self) -> f64 {
        self.theta_var.iter().sum()
    }
}

/// Moments of `estimator` (θ-block) and of the importance-weighted model
/// gradient (ψ-block).
pub fn estimator_moments(e: &Enumeration, k: usize, estimator: &Estimator, budget: &Budget) -> Result<Moments> {
    let total = budget.tuples(e.configs(), k)?;
    if let Estimator::Vimco(_) = estimator {
        if k < 2 {
            return Err(Error::SampleCount {
                k,
                reason: "leave-one-out signals need at least two samples",
            });
        }
    }
    let (tdim, pdim) = (e.theta_dim(), e.psi_dim());
    let dim = tdim + pdim;
    let sample = |t: &[usize], out: &mut [f64]| {
        let scores: Vec<f64> = t.iter().map(|&i| e.log_f[i]).collect();
        let c = theta_coefficients(estimator, &scores).expect("validated inputs");
        let w = softmax_from_logs(&scores).expect("finite scores");
        out.iter_mut().for_each(|v| *v = 0.0);
        let (theta, psi) = out.split_at_mut(tdim);
        for (j, &i) in t.iter().enumerate() {
            for ((a, dq), df) in theta.iter_mut().zip(&e.d_log_q[i]).zip(&e.d_log_f_theta[i]) {
                *a += c.score[j] * dq + c.log_f[j] * df;
            }
            for (a, df) in psi.iter_mut().zip(&e.d_log_f_psi[i]) {
                *a += w[j] * df;
            }
        }
    };
    let mean = tuple_sum(e.configs(), k, total, dim, TupleOrder::Forward, |t, acc| {
        let p = tuple_prob(&e.log_q, t);
        let mut v = vec![0.0; dim];
        sample(t, &mut v);
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += p * x;
        }
    });
    let var = tuple_sum(e.configs(), k, total, dim, TupleOrder::Forward, |t, acc| {
        let p = tuple_prob(&e.log_q, t);
        let mut v = vec![0.0; dim];
        sample(t, &mut v);
        for ((a, x), m) in acc.iter_mut().zip(&v).zip(&mean) {
            *a += p * (x - m) * (x - m);
        }
    });
    Ok(Moments {
        theta_mean: mean[..tdim].to_vec(),
        theta_var: var[..tdim].to_vec(),
        psi_mean: mean[tdim..].to_vec(),
        psi_var: var[tdim..].to_vec(),
    })
}

/// `Σ_h P(h|x) ∂log Q(h|x)/∂θ`, the direction that lowers `KL(P(h|x) ‖ Q(h|x))`.
pub fn posterior_score_grad(e: &Enumeration) -> Result<Vec<f64>> {
    let post = e.posterior()?;
    let mut out = vec![0.0; e.theta_dim()];
    for (p, g) in post.iter().zip(&e.d_log_q) {
        for (o, v) in out.iter_mut().zip(g) {
            *o += p * v;
        }
    }
    Ok(out)
}

/// `KL(P(h|x) ‖ Q(h|x))`
pub fn posterior_kl(e: &Enumeration) -> Result<f64> {
    let lpx = e.log_likelihood()?;
    Ok(e
        .log_joint
        .iter()
        .zip(&e.log_q)
        .map(|(&lj, &lq)| {
            let lp = lj - lpx;
            lp.exp() * (lp - lq)
        })
        .sum())
}

/// `Σ_x P(x) KL(P(h|x) ‖ Q(h|x))` for an unconditional model with few
/// observation bits.
pub fn expected_posterior_kl(system: &SbnSystem, budget: &Budget) -> Result<f64> {
    let dims = system.dims();
    if dims.is_conditional() {
        return Err(Error::Context("expected posterior KL is defined for unconditional models"));
    }
    let xs = budget.configs(dims.observation)?;
    let mut total = 0.0;
    for xi in 0..xs {
        let x: Vec<f64> = (0..dims.observation).map(|d| ((xi >> d) & 1) as f64).collect();
        let sizes = &dims.latent;
        let n = budget.configs(dims.total_latent_bits())?;
        let mut log_joint = Vec::with_capacity(n);
        let mut log_q = Vec::with_capacity(n);
        for i in 0..n {
            let h = LatentStack::from_index(i as u64, sizes);
            log_joint.push(system.model.log_joint(&x, &h, None)?);
            log_q.push(system.log_q(&x, &h, None)?);
        }
        let lpx = log_sum_exp(&log_joint)?;
        let kl: f64 = log_joint
            .iter()
            .zip(&log_q)
            .map(|(&lj, &lq)| (lj - lpx).exp() * (lj - lpx - lq))
            .sum();
        total += lpx.exp() * kl;
    }
    Ok(total)
}

/// Everything the oracle knows about one instance at one K.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub log_likelihood: f64,
    pub bound: f64,
    pub gradient: ExactGradient,
    pub moments: Vec<(String, Moments)>,
    pub configs: usize,
    pub tuples: usize,
}

pub fn oracle_report(
    system: &SbnSystem,
    x: &[f64],
    context: Option<&[f64]>,
    k: usize,
    estimators: &[(String, Estimator)],
    budget: &Budget,
) -> Result<OracleReport> {
    let e = enumerate(system, x, context, budget)?;
    let tuples = budget.tuples(e.configs(), k)?;
    let gradient = exact_bound_grad(system, x, context, k, budget)?;
    let moments = estimators
        .iter()
        .map(|(name, est)| Ok((name.clone(), estimator_moments(&e, k, est, budget)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport {
        log_likelihood: e.log_likelihood()?,
        bound: exact_bound_from(&e, k, budget)?,
        gradient,
        moments,
        configs: e.configs(),
        tuples,
    })
}

/// Random enumerable instances.
pub mod toys {
    use super::*;
    use crate::rng::{Rng, RngTree};
    use crate::sbn::SbnProposal;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum ToyKind {
        /// Unconditional model with an upward proposal.
        Generative,
        /// Conditional model with a learned proposal.
        SopLearned,
        /// Conditional model sampled from its own prior.
        SopPrior,
    }

    #[derive(Clone, Debug, PartialEq)]
    pub struct ToyInstance {
        pub name: String,
        pub system: SbnSystem,
        pub x: Vec<f64>,
        pub context: Option<Vec<f64>>,
    }

    impl ToyInstance {
        pub fn context(&self) -> Option<&[f64]> {
            self.context.as_deref()
        }
    }

    fn randomize(net: &mut BernoulliNet, rng: &mut Rng, scale: f64) {
        let normal = Normal::new(0.0, scale).expect("valid scale");
        for s in net.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
    }

    fn bits(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect()
    }

    /// One random instance. Parameters are i.i.d. `N(0, scale²)`.
    pub fn random_instance(
        seed: u64,
        kind: ToyKind,
        latent: &[usize],
        observation: usize,
        context: usize,
        scale: f64,
    ) -> Result<ToyInstance> {
        let tree = RngTree::new(seed);
        let ctx_dim = if kind == ToyKind::Generative { 0 } else { context.max(1) };
        let mut model = SbnModel::new(latent, observation, ctx_dim)?;
        randomize(model.net_mut(), &mut tree.stream(&[1]), scale);
        let proposal = match kind {
            ToyKind::Generative => {
                let mut q = SbnProposal::new_generative(latent, observation)?;
                randomize(q.net_mut(), &mut tree.stream(&[2]), scale);
                Proposal::Learned(q)
            }
            ToyKind::SopLearned => {
                let mut q = SbnProposal::new_sop(latent, observation, ctx_dim)?;
                randomize(q.net_mut(), &mut tree.stream(&[2]), scale);
                Proposal::Learned(q)
            }
            ToyKind::SopPrior => Proposal::Prior,
        };
        let mut data = tree.stream(&[3]);
        let x = bits(observation, &mut data);
        let context = (ctx_dim > 0).then(|| bits(ctx_dim, &mut data));
        Ok(ToyInstance {
            name: format!("{kind:?}-{latent:?}-{observation}-s{seed}"),
            system: SbnSystem::new(model, proposal)?,
            x,
            context,
        })
    }

    /// `n` instances cycling through the three kinds and a few shapes, each
    /// with at most `max_latent_bits` latent bits and at most 10 binary
    /// variables overall.
    pub fn suite(seed: u64, n: usize, max_latent_bits: usize) -> Result<Vec<ToyInstance>> {
        let shapes: &[&[usize]] = &[&[3], &[2, 1], &[1, 2], &[2], &[1, 1]];
        let kinds = [ToyKind::Generative, ToyKind::SopLearned, ToyKind::SopPrior];
        let tree = RngTree::new(seed);
        let usable: Vec<&[usize]> = shapes
            .iter()
            .copied()
            .filter(|s| s.iter().sum::<usize>() <= max_latent_bits && s.len() <= 2)
            .collect();
        if usable.is_empty() {
            return Err(Error::Config(format!("no toy shape fits {max_latent_bits} latent bits")));
        }
        (0..n)
            .map(|i| {
                let mut r = tree.stream(&[i as u64]);
                let shape = usable[i % usable.len()];
                let kind = kinds[i % kinds.len()];
                let latent_bits: usize = shape.iter().sum();
                let ctx = if kind == ToyKind::Generative { 0 } else { r.gen_range(1..=2) };
                let room = 10 - latent_bits - ctx;
                let observation = r.gen_range(3..=room.min(6));
                random_instance(tree.child(&[i as u64]).seed(), kind, shape, observation, ctx, 1.0)
            })
            .collect()
    }

    /// A one-layer model whose latent bits read disjoint pixel groups, paired
    /// with a proposal equal to its exact posterior.
    pub fn exact_posterior_instance(seed: u64, latent: usize, pixels_per_bit: usize) -> Result<ToyInstance> {
        let observation = latent * pixels_per_bit;
        let tree = RngTree::new(seed);
        let mut rng = tree.stream(&[1]);
        let normal = Normal::new(0.0, 1.5).expect("valid scale");
        let mut model = SbnModel::new(&[latent], observation, 0)?;
        let mut q = SbnProposal::new_generative(&[latent], observation)?;
        let prior_bias: Vec<f64> = (0..latent).map(|_| normal.sample(&mut rng)).collect();
        let pix_bias: Vec<f64> = (0..observation).map(|_| normal.sample(&mut rng)).collect();
        let pix_weight: Vec<f64> = (0..observation).map(|_| normal.sample(&mut rng)).collect();
        {
            let layers = model.net_mut().layers_mut();
            layers[0].bias.assign(&ndarray::Array1::from(prior_bias.clone()));
            layers[1].bias.assign(&ndarray::Array1::from(pix_bias.clone()));
            let w = &mut layers[1].inputs[0].weight;
            w.fill(0.0);
            for d in 0..observation {
                w[[d, d / pixels_per_bit]] = pix_weight[d];
            }
        }
        {
            let layer = &mut q.net_mut().layers_mut()[0];
            for (i, &prior) in prior_bias.iter().enumerate() {
                let mut b = prior;
                for d in i * pixels_per_bit..(i + 1) * pixels_per_bit {
                    let sp = crate::math::softplus;
                    b += sp(pix_bias[d]) - sp(pix_weight[d] + pix_bias[d]);
                    layer.inputs[0].weight[[i, d]] = pix_weight[d];
                }
                layer.bias[i] = b;
            }
        }
        let x = bits(observation, &mut tree.stream(&[2]));
        Ok(ToyInstance {
            name: format!("posterior-{latent}x{pixels_per_bit}-s{seed}"),
            system: SbnSystem::new(model, Proposal::Learned(q))?,
            x,
            context: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::toys::*;
    use super::*;
    use crate::objective::MeanKind;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fair_coin_marginal() {
        let m = SbnModel::new(&[1], 1, 0).unwrap();
        for x in [0.0, 1.0] {
            let l = exact_log_likelihood(&m, &[x], None, &Budget::default()).unwrap();
            assert_abs_diff_eq!(l, -std::f64::consts::LN_2, epsilon = 1e-15);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let m = SbnModel::new(&[21], 2, 0).unwrap();
        assert!(matches!(
            exact_log_likelihood(&m, &[0.0, 1.0], None, &Budget::default()),
            Err(Error::Budget(_))
        ));
        let t = random_instance(1, ToyKind::Generative, &[3], 4, 0, 1.0).unwrap();
        assert!(matches!(
            exact_bound(&t.system, &t.x, None, 7, &Budget::default()),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn likelihood_ignores_proposal() {
        let a = random_instance(2, ToyKind::Generative, &[2, 1], 4, 0, 1.0).unwrap();
        let b = random_instance(2, ToyKind::Generative, &[2, 1], 4, 0, 1.0).unwrap();
        let mut b = b;
        if let Proposal::Learned(q) = &mut b.system.proposal {
            q.net_mut().layers_mut()[0].bias.fill(3.0);
        }
        let ea = enumerate(&a.system, &a.x, None, &Budget::default()).unwrap();
        let eb = enumerate(&b.system, &b.x, None, &Budget::default()).unwrap();
        assert_eq!(ea.log_likelihood().unwrap(), eb.log_likelihood().unwrap());
    }

    #[test]
    fn single_sample_bound_is_the_elbo() {
        let t = random_instance(3, ToyKind::SopLearned, &[2], 4, 2, 1.0).unwrap();
        let e = enumerate(&t.system, &t.x, t.context(), &Budget::default()).unwrap();
        let elbo: f64 = e.log_q.iter().zip(&e.log_f).map(|(q, f)| q.exp() * f).sum();
        assert_abs_diff_eq!(exact_bound_from(&e, 1, &Budget::default()).unwrap(), elbo, epsilon = 1e-12);
    }

    #[test]
    fn posterior_proposal_is_exact() {
        let t = exact_posterior_instance(4, 2, 2).unwrap();
        let b = Budget::default();
        let e = enumerate(&t.system, &t.x, None, &b).unwrap();
        let lpx = e.log_likelihood().unwrap();
        for &l in &e.log_f {
            assert_abs_diff_eq!(l, lpx, epsilon = 1e-12);
        }
        for k in 1..=4 {
            assert_abs_diff_eq!(exact_bound_from(&e, k, &b).unwrap(), lpx, epsilon = 1e-12);
        }
        assert!(posterior_kl(&e).unwrap().abs() < 1e-12);
    }

    #[test]
    fn enumeration_order_does_not_matter() {
        let t = random_instance(5, ToyKind::Generative, &[2, 1], 3, 0, 1.0).unwrap();
        let b = Budget::default();
        let e = enumerate(&t.system, &t.x, None, &b).unwrap();
        for k in [2, 3, 4] {
            let f = analytic_bound_grad(&e, k, &b, TupleOrder::Forward).unwrap();
            let r = analytic_bound_grad(&e, k, &b, TupleOrder::Reverse).unwrap();
            for (a, c) in f.joined().iter().zip(r.joined()) {
                assert_abs_diff_eq!(*a, c, epsilon = 1e-12);
            }
            let fb = bound_from_scores(&e.log_q, &e.log_f, k, &b, TupleOrder::Forward).unwrap();
            let rb = bound_from_scores(&e.log_q, &e.log_f, k, &b, TupleOrder::Reverse).unwrap();
            assert_abs_diff_eq!(fb, rb, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_check_on_each_kind() {
        for (i, kind) in [ToyKind::Generative, ToyKind::SopLearned, ToyKind::SopPrior].into_iter().enumerate() {
            let t = random_instance(10 + i as u64, kind, &[2, 1], 4, 2, 1.0).unwrap();
            let c = bound_grad_cross_check(&t.system, &t.x, t.context(), 3, &Budget::default()).unwrap();
            assert!(c.max_rel_err() < 1e-6, "{kind:?}: {c:?}");
        }
    }

    #[test]
    fn estimator_means_match_exact_gradient() {
        let t = random_instance(20, ToyKind::Generative, &[3], 4, 0, 1.0).unwrap();
        let b = Budget::default();
        let e = enumerate(&t.system, &t.x, None, &b).unwrap();
        let exact = analytic_bound_grad(&e, 3, &b, TupleOrder::Forward).unwrap();
        for est in [Estimator::Naive, Estimator::nvil(-2.0, 0.7), Estimator::Vimco(MeanKind::Geometric)] {
            let m = estimator_moments(&e, 3, &est, &b).unwrap();
            assert!(relative_error(&m.theta_mean, &exact.theta) < 1e-10, "{est:?}");
            assert!(relative_error(&m.psi_mean, &exact.psi) < 1e-10);
        }
        let wake = estimator_moments(&e, 3, &Estimator::RwsWake, &b).unwrap();
        assert!(relative_error(&wake.theta_mean, &exact.theta) > 1e-3);
    }

    #[test]
    fn suite_fits_limits() {
        let s = suite(7, 12, 3).unwrap();
        for t in &s {
            let d = t.system.dims();
            assert!(d.total_latent_bits() <= 3);
            assert!(d.total_latent_bits() + d.observation + d.context <= 10);
            assert!(d.latent.len() <= 2);
        }
    }
}
