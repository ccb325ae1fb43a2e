//! Score-function gradient estimators for the proposal parameters θ and the
//! importance-weighted estimator for the model parameters ψ.
//!
//! Every θ-estimator has the form
//!
//! ```text
//! Σ_j score[j] · ∂log Q(h^j|x)/∂θ  +  Σ_j log_f[j] · ∂log f(x, h^j)/∂θ
//! ```
//!
//! so the estimators differ only in their [`ThetaCoefficients`]. With a
//! learned proposal `∂log f/∂θ = −∂log Q/∂θ` and the two terms collapse onto
//! a single coefficient per sample ([`ThetaCoefficients::fused`]).

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::objective::{bound, importance_weights, local_signals, MeanKind, SampleSet, ScoringMode};
use crate::rng::Rng;
use crate::sbn::{NetGrad, SbnSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Naive,
    Nvil,
    Vimco,
    RwsWake,
    RwsSleep,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Nvil => "nvil",
            EstimatorKind::Vimco => "vimco",
            EstimatorKind::RwsWake => "rws-wake",
            EstimatorKind::RwsSleep => "rws-sleep",
        }
    }

    /// Smallest K the estimator is defined for.
    pub fn min_k(&self) -> usize {
        match self {
            EstimatorKind::Vimco => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "naive" => EstimatorKind::Naive,
            "nvil" => EstimatorKind::Nvil,
            "vimco" => EstimatorKind::Vimco,
            "rws-wake" | "rws" => EstimatorKind::RwsWake,
            "rws-sleep" => EstimatorKind::RwsSleep,
            other => return Err(Error::Config(format!("unknown estimator {other:?}"))),
        })
    }
}

/// A fully parameterized θ-estimator for one K-sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimator {
    Naive,
    /// Signal `(L̂ − input − constant) · scale`. The plain estimator has
    /// `scale = 1`; training uses `1 / max(1, √v)`.
    Nvil { constant: f64, input: f64, scale: f64 },
    Vimco(MeanKind),
    RwsWake,
}

impl Estimator {
    pub fn nvil(constant: f64, input: f64) -> Self {
        Estimator::Nvil {
            constant,
            input,
            scale: 1.0,
        }
    }
}

/// Per-sample multipliers of `∂log Q/∂θ` (`score`) and `∂log f/∂θ` (`log_f`).
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaCoefficients {
    pub score: Vec<f64>,
    pub log_f: Vec<f64>,
}

impl ThetaCoefficients {
    /// The single multiplier of `∂log Q/∂θ` once `∂log f/∂θ` is expressed
    /// through it: `−∂log Q/∂θ` with a learned proposal, zero with the prior.
    pub fn fused(&self, mode: ScoringMode) -> Vec<f64> {
        match mode {
            ScoringMode::LearnedProposal => self.score.iter().zip(&self.log_f).map(|(s, w)| s - w).collect(),
            ScoringMode::PriorProposal => self.score.clone(),
        }
    }
}

pub fn theta_coefficients(estimator: &Estimator, log_f: &[f64]) -> Result<ThetaCoefficients> {
    let w = importance_weights(log_f)?;
    let k = log_f.len();
    Ok(match *estimator {
        Estimator::Naive => ThetaCoefficients {
            score: vec![bound(log_f)?; k],
            log_f: w,
        },
        Estimator::Nvil { constant, input, scale } => ThetaCoefficients {
            score: vec![(bound(log_f)? - input - constant) * scale; k],
            log_f: w,
        },
        Estimator::Vimco(mean) => ThetaCoefficients {
            score: local_signals(log_f, mean)?,
            log_f: w,
        },
        Estimator::RwsWake => ThetaCoefficients {
            score: w,
            log_f: vec![0.0; k],
        },
    })
}

/// θ- and ψ-blocks of a gradient estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientAccumulator {
    pub theta: NetGrad,
    pub psi: NetGrad,
}

impl GradientAccumulator {
    pub fn zeros(system: &SbnSystem) -> Self {
        Self {
            theta: system.zero_theta(),
            psi: system.zero_psi(),
        }
    }

    pub fn add(&mut self, other: &GradientAccumulator) -> Result<()> {
        self.theta.scaled_add(1.0, &other.theta)?;
        self.psi.scaled_add(1.0, &other.psi)
    }

    pub fn scale(&mut self, c: f64) {
        self.theta.scale(c);
        self.psi.scale(c);
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.psi.is_finite()
    }
}

/// Per-sample score-function gradients of one [`SampleSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrads {
    pub log_q_theta: Vec<NetGrad>,
    pub log_f_theta: Vec<NetGrad>,
    pub log_f_psi: Vec<NetGrad>,
}

impl SampleGrads {
    pub fn compute(system: &SbnSystem, s: &SampleSet) -> Result<Self> {
        let ctx = s.context.as_deref();
        let mut out = Self {
            log_q_theta: Vec::with_capacity(s.k()),
            log_f_theta: Vec::with_capacity(s.k()),
            log_f_psi: Vec::with_capacity(s.k()),
        };
        for h in &s.samples {
            out.log_q_theta.push(system.grad_log_q(&s.x, h, ctx)?);
            out.log_f_theta.push(system.grad_log_f_theta(&s.x, h, ctx)?);
            out.log_f_psi.push(system.grad_log_f_psi(&s.x, h, ctx)?);
        }
        Ok(out)
    }

    fn check(&self, k: usize) -> Result<()> {
        if self.log_q_theta.len() != k || self.log_f_theta.len() != k || self.log_f_psi.len() != k {
            return Err(shape_err(format!("per-sample gradients do not cover K = {k} samples")));
        }
        Ok(())
    }
}

fn combine(coef: &[f64], grads: &[NetGrad], into: &mut NetGrad) -> Result<()> {
    for (c, g) in coef.iter().zip(grads) {
        into.scaled_add(*c, g)?;
    }
    Ok(())
}

/// Both terms evaluated separately with their own per-sample gradients.
pub fn theta_grad_literal(coef: &ThetaCoefficients, grads: &SampleGrads) -> Result<NetGrad> {
    grads.check(coef.score.len())?;
    let mut out = grads.log_q_theta[0].clone();
    out.scale(0.0);
    combine(&coef.score, &grads.log_q_theta, &mut out)?;
    combine(&coef.log_f, &grads.log_f_theta, &mut out)?;
    Ok(out)
}

/// Same quantity through the fused coefficients.
pub fn theta_grad_fused(coef: &ThetaCoefficients, mode: ScoringMode, grads: &SampleGrads) -> Result<NetGrad> {
    grads.check(coef.score.len())?;
    let mut out = grads.log_q_theta[0].clone();
    out.scale(0.0);
    combine(&coef.fused(mode), &grads.log_q_theta, &mut out)?;
    Ok(out)
}

fn theta_grad(estimator: &Estimator, s: &SampleSet, grads: &SampleGrads) -> Result<NetGrad> {
    let coef = theta_coefficients(estimator, &s.log_f)?;
    theta_grad_literal(&coef, grads)
}

/// `Σ_j w̃^j ∂log f(x, h^j)/∂ψ`
pub fn model_grad(s: &SampleSet, grads: &SampleGrads) -> Result<NetGrad> {
    grads.check(s.k())?;
    let w = importance_weights(&s.log_f)?;
    let mut out = grads.log_f_psi[0].clone();
    out.scale(0.0);
    combine(&w, &grads.log_f_psi, &mut out)?;
    Ok(out)
}

pub fn naive_grad(s: &SampleSet, grads: &SampleGrads) -> Result<NetGrad> {
    theta_grad(&Estimator::Naive, s, grads)
}

/// `constant` is `b`, `input` is `b(x)`; both are treated as constants.
pub fn nvil_grad(s: &SampleSet, grads: &SampleGrads, constant: f64, input: f64) -> Result<NetGrad> {
    theta_grad(&Estimator::nvil(constant, input), s, grads)
}

pub fn vimco_grad(s: &SampleSet, grads: &SampleGrads, mean: MeanKind) -> Result<NetGrad> {
    theta_grad(&Estimator::Vimco(mean), s, grads)
}

pub fn rws_wake_grad(s: &SampleSet, grads: &SampleGrads) -> Result<NetGrad> {
    theta_grad(&Estimator::RwsWake, s, grads)
}

/// Draws `(h, x)` from the model and returns `∂log Q(h|x)/∂θ`.
pub fn rws_sleep_grad(system: &SbnSystem, rng: &mut Rng, context: Option<&[f64]>) -> Result<NetGrad> {
    if system.mode() != ScoringMode::LearnedProposal {
        return Err(Error::Config("the sleep update needs a learned proposal".into()));
    }
    let (h, x) = system.model.sample_joint(rng, context)?;
    system.grad_log_q(x.as_slice().expect("contiguous"), &h, context)
}
