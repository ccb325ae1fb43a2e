//! Minibatch training, evaluation and learning-signal monitoring.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::baseline::{BaselineNet, BaselineState, HIDDEN_UNITS};
use crate::checkpoint::{load_system, store_system, Archive};
use crate::data::{centering_stats, Cases, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{theta_coefficients, Estimator, EstimatorKind};
use crate::math::log_sum_exp;
use crate::objective::{bound, MeanKind};
use crate::optim::Adam;
use crate::rng::{tags, Rng, RngTree};
use crate::sbn::{NetGrad, Proposal, SbnModel, SbnProposal, SbnSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskMode {
    /// Unconditional model of whole images with a learned proposal.
    Generative,
    /// Bottom half given top half, sampled from the conditional prior.
    SopPrior,
    /// Bottom half given top half, with a learned proposal.
    SopLearned,
}

impl TaskMode {
    pub fn name(&self) -> &'static str {
        match self {
            TaskMode::Generative => "generative",
            TaskMode::SopPrior => "sop-prior",
            TaskMode::SopLearned => "sop-learned",
        }
    }

    pub fn is_sop(&self) -> bool {
        !matches!(self, TaskMode::Generative)
    }
}

impl FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generative" => Ok(TaskMode::Generative),
            "sop-prior" => Ok(TaskMode::SopPrior),
            "sop-learned" => Ok(TaskMode::SopLearned),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Leave-one-out fill-in used by VIMCO during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SignalMean {
    Geometric,
    Arithmetic,
    /// A baseline-style network trained to predict the mean log-score.
    Learned,
}

impl SignalMean {
    pub fn name(&self) -> &'static str {
        match self {
            SignalMean::Geometric => "geometric",
            SignalMean::Arithmetic => "arithmetic",
            SignalMean::Learned => "learned",
        }
    }
}

impl FromStr for SignalMean {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(SignalMean::Geometric),
            "arithmetic" => Ok(SignalMean::Arithmetic),
            "learned" => Ok(SignalMean::Learned),
            other => Err(Error::Config(format!("unknown mean kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many parameter updates, even mid-epoch.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub mean_kind: SignalMean,
    pub mode: TaskMode,
    pub latent: Vec<usize>,
    /// Learning rates for a sweep; empty means just `lr`.
    pub sweep: Vec<f64>,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
    /// Independent K-sample sets averaged per validation case.
    pub eval_draws: usize,
    /// Log training metrics every this many steps.
    pub log_every: u64,
    pub init_std: f64,
    /// Start the observation biases at the logit of the training pixel means.
    pub init_observation_bias: bool,
    /// Add sleep updates to the proposal gradient (learned proposals only).
    pub sleep: bool,
    pub rms_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Vimco,
            k: 5,
            lr: 1e-3,
            batch_size: 24,
            epochs: 10,
            max_steps: None,
            seed: 0,
            mean_kind: SignalMean::Geometric,
            mode: TaskMode::Generative,
            latent: vec![200],
            sweep: Vec::new(),
            eval_every: 1,
            eval_draws: 1,
            log_every: 10,
            init_std: 0.01,
            init_observation_bias: true,
            sleep: false,
            rms_decay: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < self.estimator.min_k() {
            return Err(Error::SampleCount {
                k: self.k,
                reason: "VIMCO needs at least two samples per set",
            });
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.sweep.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad("learning rates must be positive".into());
        }
        if self.latent.is_empty() || self.latent.contains(&0) {
            return bad(format!("invalid latent layer sizes {:?}", self.latent));
        }
        if self.eval_draws == 0 || self.log_every == 0 {
            return bad("eval draws and log cadence must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return bad("rms decay must lie in [0, 1)".into());
        }
        let learned = self.mode != TaskMode::SopPrior;
        if (self.sleep || self.estimator == EstimatorKind::RwsSleep) && !learned {
            return bad("sleep updates need a learned proposal".into());
        }
        if self.mean_kind != SignalMean::Geometric && self.estimator != EstimatorKind::Vimco {
            return bad("the mean kind only applies to VIMCO".into());
        }
        Ok(())
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        if self.sweep.is_empty() {
            vec![self.lr]
        } else {
            self.sweep.clone()
        }
    }
}

/// Exponentially smoothed RMS of the per-update learning signal.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalMonitor {
    pub decay: f64,
    value: Option<f64>,
}

impl SignalMonitor {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    /// Folds in the RMS of `signals` and returns the smoothed value.
    pub fn observe(&mut self, signals: &[f64]) -> f64 {
        let rms = (signals.iter().map(|s| s * s).sum::<f64>() / signals.len().max(1) as f64).sqrt();
        let v = match self.value {
            None => rms,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * rms,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// The three splits in the shape the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Cases,
    pub valid: Cases,
    pub test: Cases,
}

impl TaskData {
    pub fn new(ds: &Dataset, mode: TaskMode) -> Result<Self> {
        let view = |m: &Array2<f64>| {
            if mode.is_sop() {
                Cases::sop(m, ds.height, ds.width)
            } else {
                Ok(Cases::full(m))
            }
        };
        Ok(Self {
            train: view(&ds.train)?,
            valid: view(&ds.valid)?,
            test: view(&ds.test)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,split,metric,value,k,estimator,lr,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    /// Best validation bound and the step it was reached at.
    pub best: Option<(f64, u64)>,
    pub best_system: SbnSystem,
    pub final_system: SbnSystem,
    pub steps: u64,
    /// Checkpoint files written, if a run directory was given.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn metric(&self, split: &str, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn metrics_csv(&self, cfg: &TrainConfig) -> String {
        metrics_csv(&self.rows, cfg)
    }
}

pub fn metrics_csv(rows: &[MetricRow], cfg: &TrainConfig) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.split, r.metric, r.value, cfg.k, cfg.estimator, cfg.lr, cfg.seed
        );
    }
    out
}

/// Builds a freshly initialized system for `mode`.
pub fn init_system(cfg: &TrainConfig, observation: usize, context: usize, pixel_means: Option<&Array1<f64>>) -> Result<SbnSystem> {
    let tree = RngTree::new(cfg.seed);
    let ctx = if cfg.mode.is_sop() { context } else { 0 };
    let mut model = SbnModel::new(&cfg.latent, observation, ctx)?;
    model.net_mut().init_gaussian(&mut tree.stream(&[tags::INIT, 0]), cfg.init_std);
    if let (true, Some(m)) = (cfg.init_observation_bias, pixel_means) {
        model.set_observation_bias_from_means(m.view())?;
    }
    let proposal = match cfg.mode {
        TaskMode::SopPrior => Proposal::Prior,
        TaskMode::Generative | TaskMode::SopLearned => {
            let mut q = if cfg.mode == TaskMode::Generative {
                SbnProposal::new_generative(&cfg.latent, observation)?
            } else {
                SbnProposal::new_sop(&cfg.latent, observation, ctx)?
            };
            q.net_mut().init_gaussian(&mut tree.stream(&[tags::INIT, 1]), cfg.init_std);
            Proposal::Learned(q)
        }
    };
    SbnSystem::new(model, proposal)
}

/// Training state: the system, its optimizers and the variance-reduction state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub system: SbnSystem,
    model_adam: Adam,
    proposal_adam: Option<Adam>,
    pub baseline: Option<BaselineState>,
    predictor: Option<(BaselineNet, Adam)>,
    pub monitor: SignalMonitor,
    pub step: u64,
    obs_mean: Array1<f64>,
    ctx_mean: Option<Array1<f64>>,
    tree: RngTree,
}

/// What one update reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Mean of `L̂` over the minibatch.
    pub bound: f64,
    /// RMS of this step's learning signals.
    pub signal_rms: f64,
    pub smoothed_rms: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: &Cases) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Empty);
        }
        if config.mode.is_sop() != train.contexts.is_some() {
            return Err(Error::Context("mode and data disagree about contexts"));
        }
        let obs_mean = centering_stats(train.observations.view())?;
        let ctx_mean = train.contexts.as_ref().map(|c| centering_stats(c.view())).transpose()?;
        let ctx_dim = train.contexts.as_ref().map_or(0, |c| c.ncols());
        let mut system = init_system(&config, train.observations.ncols(), ctx_dim, Some(&obs_mean))?;
        if let Proposal::Learned(q) = &mut system.proposal {
            q.set_input_centering(Some(obs_mean.clone()), ctx_mean.clone())?;
        }
        let tree = RngTree::new(config.seed);
        let input_dim = obs_mean.len() + ctx_mean.as_ref().map_or(0, |c| c.len());
        let baseline = (config.estimator == EstimatorKind::Nvil)
            .then(|| BaselineState::new(input_dim, &mut tree.stream(&[tags::INIT, 2])));
        let predictor = (config.estimator == EstimatorKind::Vimco && config.mean_kind == SignalMean::Learned).then(|| {
            let net = BaselineNet::new(input_dim, HIDDEN_UNITS, &mut tree.stream(&[tags::INIT, 3]));
            let adam = Adam::for_blocks(&net.param_slices());
            (net, adam)
        });
        let model_adam = Adam::for_blocks(&system.model.net().param_slices());
        let proposal_adam = match &system.proposal {
            Proposal::Learned(q) => Some(Adam::for_blocks(&q.net().param_slices())),
            Proposal::Prior => None,
        };
        Ok(Self {
            monitor: SignalMonitor::new(config.rms_decay),
            config,
            system,
            model_adam,
            proposal_adam,
            baseline,
            predictor,
            step: 0,
            obs_mean,
            ctx_mean,
            tree,
        })
    }

    /// Training-split means used for input centering.
    pub fn centering(&self) -> (&Array1<f64>, Option<&Array1<f64>>) {
        (&self.obs_mean, self.ctx_mean.as_ref())
    }

    /// Centered `[context, observation]` rows fed to the baseline networks.
    fn baseline_inputs(&self, xs: ArrayView2<f64>, cs: Option<ArrayView2<f64>>) -> Array2<f64> {
        let x = &xs - &self.obs_mean;
        match (cs, &self.ctx_mean) {
            (Some(c), Some(m)) => ndarray::concatenate(Axis(1), &[(&c - m).view(), x.view()]).expect("same rows"),
            _ => x,
        }
    }

    /// One parameter update on the given minibatch. `keys` addresses the
    /// per-case random streams.
    pub fn step_on(&mut self, xs: ArrayView2<f64>, cs: Option<ArrayView2<f64>>, keys: [u64; 2]) -> Result<StepStats> {
        let cfg = &self.config;
        let (b, k) = (xs.nrows(), cfg.k);
        let train_tree = self.tree.child(&[tags::TRAIN]);
        let mut rngs: Vec<Rng> = (0..b as u64).map(|i| train_tree.stream(&[keys[0], keys[1], i])).collect();
        let batch = self.system.sample_batch(xs, cs, k, &mut rngs)?;
        let lhat: Vec<f64> = (0..b).map(|i| bound(batch.case_log_f(i))).collect::<Result<_>>()?;
        if !lhat.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("training bound"));
        }

        let needs_inputs = self.baseline.is_some() || self.predictor.is_some();
        let inputs = needs_inputs.then(|| self.baseline_inputs(xs, cs));
        let lr = cfg.lr;
        let mut monitored: Vec<f64> = Vec::with_capacity(b * k);
        let estimators: Vec<Estimator> = match cfg.estimator {
            EstimatorKind::Naive => vec![Estimator::Naive; b],
            EstimatorKind::Nvil => {
                let st = self.baseline.as_mut().expect("nvil state");
                let sig = st.update(inputs.as_ref().expect("inputs").view(), &lhat, lr)?;
                monitored.extend(&sig.centered);
                let scale = st.normalization();
                sig.predicted
                    .iter()
                    .map(|&p| Estimator::Nvil {
                        constant: st.constant,
                        input: p,
                        scale,
                    })
                    .collect()
            }
            EstimatorKind::Vimco => match cfg.mean_kind {
                SignalMean::Geometric => vec![Estimator::Vimco(MeanKind::Geometric); b],
                SignalMean::Arithmetic => vec![Estimator::Vimco(MeanKind::Arithmetic); b],
                SignalMean::Learned => {
                    let (net, adam) = self.predictor.as_mut().expect("predictor");
                    let x_in = inputs.as_ref().expect("inputs");
                    let pred = net.predict_batch(x_in.view())?;
                    let targets =
                        Array1::from_iter((0..b).map(|i| batch.case_log_f(i).iter().sum::<f64>() / k as f64));
                    net.fit_step(adam, x_in.view(), targets.view(), lr)?;
                    pred.iter().map(|&p| Estimator::Vimco(MeanKind::Predicted(p))).collect()
                }
            },
            EstimatorKind::RwsWake | EstimatorKind::RwsSleep => vec![Estimator::RwsWake; b],
        };

        let mode = self.system.mode();
        let mut theta_coef = Array1::zeros(b * k);
        let mut psi_coef = Array1::zeros(b * k);
        for (i, est) in estimators.iter().enumerate() {
            let c = theta_coefficients(est, batch.case_log_f(i))?;
            if cfg.estimator != EstimatorKind::Nvil {
                monitored.extend(&c.score);
            }
            let fused = c.fused(mode);
            // importance weights
            let w = match est {
                Estimator::RwsWake => c.score.clone(),
                _ => c.log_f.clone(),
            };
            for j in 0..k {
                theta_coef[i * k + j] = fused[j];
                psi_coef[i * k + j] = w[j];
            }
        }
        let mut g_theta = self.system.zero_theta();
        if cfg.estimator != EstimatorKind::RwsSleep {
            self.system.theta_grad_batch(&batch, theta_coef.view(), &mut g_theta)?;
        }
        if cfg.sleep || cfg.estimator == EstimatorKind::RwsSleep {
            let sleep_tree = self.tree.child(&[tags::SLEEP]);
            let mut srngs: Vec<Rng> = (0..b as u64).map(|i| sleep_tree.stream(&[keys[0], keys[1], i])).collect();
            self.system.sleep_grad_batch(cs, &mut srngs, &mut g_theta)?;
        }
        let mut g_psi = self.system.zero_psi();
        self.system.psi_grad_batch(&batch, psi_coef.view(), &mut g_psi)?;
        g_theta.scale(1.0 / b as f64);
        g_psi.scale(1.0 / b as f64);
        if !(g_theta.is_finite() && g_psi.is_finite()) {
            return Err(Error::NonFinite("gradient estimate"));
        }
        self.apply(g_theta, g_psi)?;
        self.step += 1;

        let signal_rms = (monitored.iter().map(|s| s * s).sum::<f64>() / monitored.len().max(1) as f64).sqrt();
        let smoothed_rms = self.monitor.observe(&monitored);
        Ok(StepStats {
            bound: lhat.iter().sum::<f64>() / b as f64,
            signal_rms,
            smoothed_rms,
        })
    }

    fn apply(&mut self, g_theta: NetGrad, g_psi: NetGrad) -> Result<()> {
        let lr = self.config.lr;
        match &mut self.system.proposal {
            Proposal::Prior => {
                // θ and ψ are disjoint layers of the same net.
                let mut g = g_psi;
                g.scaled_add(1.0, &g_theta)?;
                self.model_adam
                    .ascend(&mut self.system.model.net_mut().param_slices_mut(), &g.slices(), lr)
            }
            Proposal::Learned(q) => {
                let adam = self.proposal_adam.as_mut().expect("proposal optimizer");
                adam.ascend(&mut q.net_mut().param_slices_mut(), &g_theta.slices(), lr)?;
                self.model_adam
                    .ascend(&mut self.system.model.net_mut().param_slices_mut(), &g_psi.slices(), lr)
            }
        }
    }

    /// Full training state as a tensor archive.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        let c = &self.config;
        a.set_meta("train.mode", c.mode.name())?;
        a.set_meta("train.estimator", c.estimator)?;
        a.set_meta("train.k", c.k)?;
        a.set_meta("train.lr", c.lr)?;
        a.set_meta("train.step", self.step)?;
        a.insert_u64("rng.seed", self.tree.seed())?;
        store_system(&mut a, &self.system)?;
        a.insert("centering.observation", vec![self.obs_mean.len()], self.obs_mean.to_vec())?;
        if let Some(m) = &self.ctx_mean {
            a.insert("centering.context", vec![m.len()], m.to_vec())?;
        }
        store_adam(&mut a, "optim.model", &self.model_adam)?;
        if let Some(adam) = &self.proposal_adam {
            store_adam(&mut a, "optim.proposal", adam)?;
        }
        if let Some(st) = &self.baseline {
            a.insert("baseline.constant", vec![], vec![st.constant])?;
            a.insert("baseline.variance", vec![], vec![st.variance])?;
            store_net(&mut a, "baseline.net", &st.net)?;
            store_adam(&mut a, "optim.baseline", &st.adam)?;
        }
        if let Some((net, adam)) = &self.predictor {
            store_net(&mut a, "predictor.net", net)?;
            store_adam(&mut a, "optim.predictor", adam)?;
        }
        Ok(a)
    }
}

fn store_adam(a: &mut Archive, prefix: &str, adam: &Adam) -> Result<()> {
    a.insert_u64(&format!("{prefix}.step"), adam.steps())?;
    let (m, v) = adam.moments();
    for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
        a.insert(&format!("{prefix}.m{i}"), vec![mi.len()], mi.clone())?;
        a.insert(&format!("{prefix}.v{i}"), vec![vi.len()], vi.clone())?;
    }
    Ok(())
}

fn store_net(a: &mut Archive, prefix: &str, net: &BaselineNet) -> Result<()> {
    let (h, i) = net.w1.dim();
    a.insert(&format!("{prefix}.w1"), vec![h, i], net.w1.iter().copied().collect())?;
    a.insert(&format!("{prefix}.b1"), vec![h], net.b1.to_vec())?;
    a.insert(&format!("{prefix}.w2"), vec![h], net.w2.to_vec())?;
    a.insert(&format!("{prefix}.b2"), vec![1], net.b2.to_vec())
}

/// Restores the optimizer moments stored under `prefix`.
pub fn load_adam(a: &Archive, prefix: &str, adam: &mut Adam) -> Result<()> {
    let blocks = adam.moments().0.len();
    let mut m = Vec::with_capacity(blocks);
    let mut v = Vec::with_capacity(blocks);
    for i in 0..blocks {
        m.push(a.require(&format!("{prefix}.m{i}"))?.1.to_vec());
        v.push(a.require(&format!("{prefix}.v{i}"))?.1.to_vec());
    }
    adam.restore(a.get_u64(&format!("{prefix}.step"))?, m, v)
}

/// The system stored in a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SbnSystem> {
    load_system(&Archive::read(path)?)
}

/// The seeded case order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, cases: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cases).collect();
    order.shuffle(&mut RngTree::new(seed).stream(&[tags::SHUFFLE, epoch]));
    order
}

fn rows_of(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

const EVAL_CHUNK: usize = 100;

/// Mean over cases and `draws` of the K-sample bound. Case `i`, draw `d`
/// uses stream `(EVAL, d, i)` of `tree`.
pub fn eval_bound(system: &SbnSystem, cases: &Cases, k: usize, draws: usize, tree: &RngTree) -> Result<f64> {
    if cases.is_empty() || draws == 0 {
        return Err(Error::Empty);
    }
    let mut total = 0.0;
    for d in 0..draws {
        for start in (0..cases.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(cases.len());
            let xs = cases.observations.slice(s![start..end, ..]);
            let cs = cases.contexts.as_ref().map(|c| c.slice(s![start..end, ..]));
            let mut rngs: Vec<Rng> = (start..end)
                .map(|i| tree.stream(&[tags::EVAL, d as u64, i as u64]))
                .collect();
            let batch = system.sample_batch(xs, cs, k, &mut rngs)?;
            for i in 0..end - start {
                total += bound(batch.case_log_f(i))?;
            }
        }
    }
    Ok(total / (cases.len() * draws) as f64)
}

/// Per-case `−(log Σ_s f(x, h^s) − log S)` estimates.
pub fn eval_nll_per_case(system: &SbnSystem, cases: &Cases, samples: usize, tree: &RngTree) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::SampleCount {
            k: 0,
            reason: "at least one sample is required",
        });
    }
    // Keep each batch near EVAL_CHUNK · 10 rows.
    let per = (1000 / samples).max(1);
    let mut out = Vec::with_capacity(cases.len());
    for start in (0..cases.len()).step_by(per) {
        let end = (start + per).min(cases.len());
        let xs = cases.observations.slice(s![start..end, ..]);
        let cs = cases.contexts.as_ref().map(|c| c.slice(s![start..end, ..]));
        let mut rngs: Vec<Rng> = (start..end).map(|i| tree.stream(&[tags::EVAL, u64::MAX, i as u64])).collect();
        let batch = system.sample_batch(xs, cs, samples, &mut rngs)?;
        for i in 0..end - start {
            let l = batch.case_log_f(i);
            out.push(-(log_sum_exp(l)? - (samples as f64).ln()));
        }
    }
    Ok(out)
}

/// Mean NLL estimate; an upper bound on the true NLL in expectation.
pub fn eval_nll(system: &SbnSystem, cases: &Cases, samples: usize, tree: &RngTree) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Empty);
    }
    let v = eval_nll_per_case(system, cases, samples, tree)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

struct BestTracker {
    best: Option<(f64, u64)>,
    system: Option<SbnSystem>,
    rows: Vec<MetricRow>,
    checkpoints: Vec<PathBuf>,
    dir: Option<PathBuf>,
    last_eval: Option<u64>,
}

impl BestTracker {
    fn evaluate(&mut self, trainer: &Trainer, data: &TaskData, epoch: usize, tree: &RngTree) -> Result<()> {
        let cfg = &trainer.config;
        let v = eval_bound(&trainer.system, &data.valid, cfg.k, cfg.eval_draws, tree)?;
        self.last_eval = Some(trainer.step);
        self.rows.push(MetricRow {
            step: trainer.step,
            epoch,
            split: "valid",
            metric: "bound",
            value: v,
        });
        if self.best.is_none_or(|(b, _)| v > b) {
            self.best = Some((v, trainer.step));
            self.system = Some(trainer.system.clone());
            if let Some(d) = &self.dir {
                let path = d.join("best.ckpt");
                trainer.to_archive()?.write(&path)?;
                if !self.checkpoints.contains(&path) {
                    self.checkpoints.push(path);
                }
            }
        }
        Ok(())
    }
}

/// Trains for the configured budget, keeping the best validation checkpoint.
/// With a run directory, checkpoints go to `<dir>/checkpoints/`.
pub fn train(config: &TrainConfig, data: &TaskData, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), &data.train)?;
    let dir = run_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let mut t = BestTracker {
        best: None,
        system: None,
        rows: Vec::new(),
        checkpoints: Vec::new(),
        dir,
        last_eval: None,
    };
    let tree = RngTree::new(config.seed);
    let n = data.train.len();
    let batches = n.div_ceil(config.batch_size);
    let limit = config.max_steps.unwrap_or(u64::MAX);
    let mut epoch = 0;

    'outer: while epoch < config.epochs {
        let order = epoch_order(config.seed, epoch as u64, n);
        for bi in 0..batches {
            if trainer.step >= limit {
                break 'outer;
            }
            let idx = &order[bi * config.batch_size..((bi + 1) * config.batch_size).min(n)];
            let xs = rows_of(&data.train.observations, idx);
            let cs = data.train.contexts.as_ref().map(|c| rows_of(c, idx));
            let stats = trainer.step_on(xs.view(), cs.as_ref().map(|c| c.view()), [epoch as u64, bi as u64])?;
            if trainer.step % config.log_every == 0 {
                for (metric, value) in [("bound", stats.bound), ("signal_rms", stats.smoothed_rms)] {
                    t.rows.push(MetricRow {
                        step: trainer.step,
                        epoch,
                        split: "train",
                        metric,
                        value,
                    });
                }
            }
        }
        if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 {
            t.evaluate(&trainer, data, epoch, &tree)?;
        }
        epoch += 1;
    }
    if config.eval_every > 0 && t.last_eval != Some(trainer.step) {
        t.evaluate(&trainer, data, epoch.min(config.epochs.saturating_sub(1)), &tree)?;
    }
    if let Some(d) = &t.dir {
        let path = d.join("final.ckpt");
        trainer.to_archive()?.write(&path)?;
        t.checkpoints.push(path);
    }
    Ok(TrainOutcome {
        rows: t.rows,
        best: t.best,
        best_system: t.system.unwrap_or_else(|| trainer.system.clone()),
        final_system: trainer.system,
        steps: trainer.step,
        checkpoints: t.checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_bars;
    use crate::oracle::{exact_log_likelihood, toys, Budget};
    use approx::assert_abs_diff_eq;

    fn bars(n: usize) -> Dataset {
        let imgs = toy_bars(4, n, 0.02, 3);
        let third = n / 3;
        Dataset::from_images(imgs, 4, 4, [n - 2 * third, third, third]).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig {
            estimator: EstimatorKind::Vimco,
            k: 1,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::SampleCount { k: 1, .. })));
        c.k = 2;
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            mode: TaskMode::SopPrior,
            sleep: true,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            estimator: EstimatorKind::Nvil,
            k: 1,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn monitor_smooths() {
        let mut m = SignalMonitor::new(0.5);
        assert_eq!(m.observe(&[3.0, -3.0]), 3.0);
        assert_eq!(m.observe(&[1.0]), 2.0);
        assert_eq!(m.value(), Some(2.0));
    }

    #[test]
    fn training_raises_the_bound_and_is_deterministic() {
        let ds = bars(90);
        let data = TaskData::new(&ds, TaskMode::Generative).unwrap();
        let cfg = TrainConfig {
            k: 5,
            latent: vec![6],
            epochs: 40,
            batch_size: 10,
            lr: 3e-2,
            init_std: 0.1,
            log_every: 1,
            eval_every: 10,
            ..Default::default()
        };
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.metrics_csv(&cfg), b.metrics_csv(&cfg));
        let tr = a.metric("train", "bound");
        let head: f64 = tr[..20].iter().map(|v| v.1).sum::<f64>() / 20.0;
        let tail: f64 = tr[tr.len() - 20..].iter().map(|v| v.1).sum::<f64>() / 20.0;
        assert!(tail > head + 1.0, "{head} -> {tail}");
        let valid = a.metric("valid", "bound");
        let best = valid.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best.unwrap().0, best);
        let again = eval_bound(&a.best_system, &data.valid, cfg.k, 1, &RngTree::new(cfg.seed)).unwrap();
        assert_eq!(again, best);
    }

    #[test]
    fn every_estimator_and_mode_runs() {
        let ds = bars(60);
        for mode in [TaskMode::Generative, TaskMode::SopPrior, TaskMode::SopLearned] {
            let data = TaskData::new(&ds, mode).unwrap();
            for (est, k, mean, sleep) in [
                (EstimatorKind::Naive, 3, SignalMean::Geometric, false),
                (EstimatorKind::Nvil, 1, SignalMean::Geometric, false),
                (EstimatorKind::Vimco, 3, SignalMean::Arithmetic, false),
                (EstimatorKind::Vimco, 3, SignalMean::Learned, false),
                (EstimatorKind::RwsWake, 3, SignalMean::Geometric, mode != TaskMode::SopPrior),
            ] {
                let cfg = TrainConfig {
                    estimator: est,
                    k,
                    mean_kind: mean,
                    mode,
                    sleep,
                    latent: vec![3, 2],
                    epochs: 2,
                    batch_size: 8,
                    ..Default::default()
                };
                let out = train(&cfg, &data, None).unwrap();
                assert!(out.best.unwrap().0.is_finite(), "{mode:?} {est:?}");
            }
        }
    }

    #[test]
    fn centering_uses_training_split_only() {
        let ds = bars(60);
        let data = TaskData::new(&ds, TaskMode::SopLearned).unwrap();
        let t = Trainer::new(
            TrainConfig {
                mode: TaskMode::SopLearned,
                ..Default::default()
            },
            &data.train,
        )
        .unwrap();
        let (o, c) = t.centering();
        assert_eq!(*o, centering_stats(data.train.observations.view()).unwrap());
        assert_eq!(*c.unwrap(), centering_stats(data.train.contexts.as_ref().unwrap().view()).unwrap());
        assert_ne!(*o, centering_stats(data.valid.observations.view()).unwrap());
    }

    #[test]
    fn checkpoints_restore_the_best_system() {
        let dir = tempfile::tempdir().unwrap();
        let ds = bars(60);
        let data = TaskData::new(&ds, TaskMode::SopLearned).unwrap();
        let cfg = TrainConfig {
            estimator: EstimatorKind::Nvil,
            k: 2,
            mode: TaskMode::SopLearned,
            latent: vec![4],
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let out = train(&cfg, &data, Some(dir.path())).unwrap();
        let back = load_checkpoint(dir.path().join("checkpoints/best.ckpt")).unwrap();
        assert_eq!(back, out.best_system);
        let a = Archive::read(dir.path().join("checkpoints/final.ckpt")).unwrap();
        assert_eq!(a.get_u64("rng.seed").unwrap(), cfg.seed);
        let mut adam = Adam::for_blocks(&out.final_system.model.net().param_slices());
        load_adam(&a, "optim.model", &mut adam).unwrap();
        assert_eq!(adam.steps(), out.steps);
        assert!(a.get("baseline.net.w1").is_some());
    }

    #[test]
    fn evaluation_against_the_oracle() {
        let t = toys::exact_posterior_instance(3, 2, 3).unwrap();
        let cases = Cases {
            observations: Array2::from_shape_vec((1, t.x.len()), t.x.clone()).unwrap(),
            contexts: None,
        };
        let lpx = exact_log_likelihood(&t.system.model, &t.x, None, &Budget::default()).unwrap();
        let tree = RngTree::new(4);
        for k in [1, 3] {
            assert_abs_diff_eq!(eval_bound(&t.system, &cases, k, 2, &tree).unwrap(), lpx, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(eval_nll(&t.system, &cases, 7, &tree).unwrap(), -lpx, epsilon = 1e-12);
    }
}
