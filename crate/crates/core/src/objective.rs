//! Multi-sample bound, importance weights and leave-one-out learning signals.
//!
//! The slice-level functions take the per-sample log-scores `l[i] = log f(x, h^i)`
//! directly; [`SampleSet`] ties them to the latents that produced them.

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, softmax_from_logs};
use crate::rng::Rng;
use crate::sbn::{LatentStack, SbnSystem};

pub use crate::sbn::ScoringMode;

/// How the held-out score is filled in when computing the leave-one-out bound
/// `L̂^{−j}`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum MeanKind {
    /// `exp(mean of l[i], i ≠ j)`
    #[default]
    Geometric,
    /// `mean of exp(l[i]), i ≠ j`
    Arithmetic,
    /// A log-score predicted from the observation alone, shared by every `j`.
    Predicted(f64),
}

/// K scored samples for a single observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub x: Vec<f64>,
    pub context: Option<Vec<f64>>,
    pub mode: ScoringMode,
    pub samples: Vec<LatentStack>,
    /// `log Q(h^i | x)` (the prior in prior-proposal mode)
    pub log_q: Vec<f64>,
    /// `log f(x, h^i)`
    pub log_f: Vec<f64>,
}

impl SampleSet {
    pub fn k(&self) -> usize {
        self.log_f.len()
    }

    pub fn bound(&self) -> Result<f64> {
        bound(&self.log_f)
    }

    pub fn importance_weights(&self) -> Result<Vec<f64>> {
        importance_weights(&self.log_f)
    }

    pub fn local_signals(&self, mean: MeanKind) -> Result<Vec<f64>> {
        local_signals(&self.log_f, mean)
    }

    pub fn report(&self, mean: MeanKind) -> Result<BoundReport> {
        BoundReport::compute(&self.log_f, mean)
    }
}

/// Draws K independent samples from the system's proposal and scores them.
pub fn score_samples(
    system: &SbnSystem,
    x: &[f64],
    k: usize,
    rng: &mut Rng,
    context: Option<&[f64]>,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::SampleCount {
            k,
            reason: "at least one sample is required",
        });
    }
    let mut samples = Vec::with_capacity(k);
    let mut log_q = Vec::with_capacity(k);
    let mut log_f = Vec::with_capacity(k);
    for _ in 0..k {
        let (h, lq) = system.sample_proposal(x, rng, context)?;
        log_f.push(system.log_f(x, &h, context)?);
        log_q.push(lq);
        samples.push(h);
    }
    if !log_f.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("sample log-scores"));
    }
    Ok(SampleSet {
        x: x.to_vec(),
        context: context.map(<[f64]>::to_vec),
        mode: system.mode(),
        samples,
        log_q,
        log_f,
    })
}

/// `L̂ = log_sum_exp(l) − log K`
pub fn bound(log_f: &[f64]) -> Result<f64> {
    Ok(log_sum_exp(log_f)? - (log_f.len() as f64).ln())
}

pub fn importance_weights(log_f: &[f64]) -> Result<Vec<f64>> {
    softmax_from_logs(log_f)
}

/// Per-sample signals `L̂ − L̂^{−j}`.
pub fn local_signals(log_f: &[f64], mean: MeanKind) -> Result<Vec<f64>> {
    let k = log_f.len();
    if k < 2 {
        return Err(Error::SampleCount {
            k,
            reason: "leave-one-out signals need at least two samples",
        });
    }
    let lse = log_sum_exp(log_f)?;
    let max = log_f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total_shifted: f64 = log_f.iter().map(|&v| v - max).sum();
    let mut replaced = log_f.to_vec();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let held_out = match mean {
            // Shifting by the max makes the held-out mean reproduce a common
            // value exactly, so equal scores give signals of exactly zero.
            MeanKind::Geometric => max + (total_shifted - (log_f[j] - max)) / (k - 1) as f64,
            MeanKind::Arithmetic => {
                let m = (0..k)
                    .filter(|&i| i != j)
                    .map(|i| log_f[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..k).filter(|&i| i != j).map(|i| (log_f[i] - m).exp()).sum();
                m + (sum / (k - 1) as f64).ln()
            }
            MeanKind::Predicted(v) => {
                if !v.is_finite() {
                    return Err(Error::NonFinite("predicted log-score"));
                }
                v
            }
        };
        replaced[j] = held_out;
        out.push(lse - log_sum_exp(&replaced)?);
        replaced[j] = log_f[j];
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub lhat: f64,
    pub weights: Vec<f64>,
    /// `None` for K = 1.
    pub local: Option<Vec<f64>>,
    pub mean_kind: MeanKind,
}

impl BoundReport {
    pub fn compute(log_f: &[f64], mean_kind: MeanKind) -> Result<Self> {
        Ok(Self {
            lhat: bound(log_f)?,
            weights: importance_weights(log_f)?,
            local: if log_f.len() >= 2 {
                Some(local_signals(log_f, mean_kind)?)
            } else {
                None
            },
            mean_kind,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngTree;
    use crate::sbn::{Proposal, SbnModel, SbnProposal};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bound_examples() {
        assert_abs_diff_eq!(bound(&[0.5f64.ln(); 2]).unwrap(), -LN2, epsilon = 1e-15);
        assert_eq!(bound(&[-3.25]).unwrap(), -3.25);
        assert_abs_diff_eq!(bound(&[0.0, 3f64.ln()]).unwrap(), LN2, epsilon = 1e-15);
    }

    #[test]
    fn weight_examples() {
        for w in importance_weights(&[2.0; 5]).unwrap() {
            assert_abs_diff_eq!(w, 0.2, epsilon = 1e-15);
        }
        let w = importance_weights(&[0.0, 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(w[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.75, epsilon = 1e-15);
        assert_eq!(importance_weights(&[-7.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn equal_scores_give_exactly_zero_signals() {
        for c in [-1234.5678, -0.1, 0.0, 17.3] {
            for k in 2..12 {
                for mean in [MeanKind::Geometric, MeanKind::Arithmetic] {
                    let s = local_signals(&vec![c; k], mean).unwrap();
                    assert!(s.iter().all(|&v| v == 0.0), "{c} {k} {mean:?}: {s:?}");
                }
            }
        }
    }

    #[test]
    fn two_sample_hand_example() {
        let s = local_signals(&[0.0, 3f64.ln()], MeanKind::Geometric).unwrap();
        assert_abs_diff_eq!(s[0], LN2 - 3f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], LN2, epsilon = 1e-15);
        let a = local_signals(&[0.0, 3f64.ln()], MeanKind::Arithmetic).unwrap();
        assert_eq!(s, a);
    }

    #[test]
    fn geometric_and_arithmetic_differ_with_unequal_held_out() {
        let l = [0.0, 1.0, -2.0];
        let g = local_signals(&l, MeanKind::Geometric).unwrap();
        let a = local_signals(&l, MeanKind::Arithmetic).unwrap();
        assert!(g.iter().zip(&a).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn single_sample_is_rejected() {
        assert!(matches!(
            local_signals(&[0.3], MeanKind::Geometric),
            Err(Error::SampleCount { k: 1, .. })
        ));
        let r = BoundReport::compute(&[0.3], MeanKind::Geometric).unwrap();
        assert!(r.local.is_none());
        assert_eq!(r.lhat, 0.3);
    }

    #[test]
    fn prior_mode_scores_are_likelihoods() {
        let mut m = SbnModel::new(&[2], 3, 2).unwrap();
        m.net_mut().init_gaussian(&mut RngTree::new(1).stream(&[]), 1.0);
        let sys = SbnSystem::new(m, Proposal::Prior).unwrap();
        let x = [1.0, 0.0, 1.0];
        let c = [0.0, 1.0];
        let s = score_samples(&sys, &x, 6, &mut RngTree::new(2).stream(&[]), Some(&c)).unwrap();
        assert_eq!(s.mode, ScoringMode::PriorProposal);
        for (h, &l) in s.samples.iter().zip(&s.log_f) {
            assert_eq!(l, sys.model.log_likelihood(&x, h, Some(&c)).unwrap());
        }
        let again = score_samples(&sys, &x, 6, &mut RngTree::new(2).stream(&[]), Some(&c)).unwrap();
        assert_eq!(s, again);
        assert!(score_samples(&sys, &x, 0, &mut RngTree::new(2).stream(&[]), Some(&c)).is_err());
    }

    #[test]
    fn learned_mode_scores() {
        let mut m = SbnModel::new(&[2, 2], 4, 0).unwrap();
        m.net_mut().init_gaussian(&mut RngTree::new(3).stream(&[]), 1.0);
        let mut q = SbnProposal::new_generative(&[2, 2], 4).unwrap();
        q.net_mut().init_gaussian(&mut RngTree::new(4).stream(&[]), 1.0);
        let sys = SbnSystem::new(m, Proposal::Learned(q)).unwrap();
        let x = [1.0, 1.0, 0.0, 1.0];
        let s = score_samples(&sys, &x, 5, &mut RngTree::new(5).stream(&[]), None).unwrap();
        for ((h, &l), &lq) in s.samples.iter().zip(&s.log_f).zip(&s.log_q) {
            let joint = sys.model.log_joint(&x, h, None).unwrap();
            assert_abs_diff_eq!(l, joint - lq, epsilon = 1e-12);
        }
    }

    // Signal_j from the defining formula with explicit exponentials.
    fn direct_signals(l: &[f64]) -> Vec<f64> {
        let k = l.len();
        let f: Vec<f64> = l.iter().map(|v| v.exp()).collect();
        let total: f64 = f.iter().sum();
        (0..k)
            .map(|j| {
                let others: f64 = (0..k).filter(|&i| i != j).map(|i| l[i]).sum::<f64>() / (k - 1) as f64;
                let loo = total - f[j] + others.exp();
                (total / k as f64).ln() - (loo / k as f64).ln()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn weights_normalized(l in prop::collection::vec(-700.0f64..700.0, 1..30)) {
            let w = importance_weights(&l).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn log_domain_matches_direct_formula(l in prop::collection::vec(-5.0f64..5.0, 2..20)) {
            let s = local_signals(&l, MeanKind::Geometric).unwrap();
            for (a, b) in s.iter().zip(direct_signals(&l)) {
                prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }

        #[test]
        fn signals_are_shift_invariant(
            l in prop::collection::vec(-30.0f64..30.0, 2..20),
            c in -500.0f64..500.0,
        ) {
            let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
            for mean in [MeanKind::Geometric, MeanKind::Arithmetic] {
                let a = local_signals(&l, mean).unwrap();
                let b = local_signals(&shifted, mean).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }
}
