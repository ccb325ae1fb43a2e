//! Numerically stable scalar and vector primitives.
//!
//! Everything that touches probabilities works on log values. The only place
//! scores are exponentiated is after a max shift, so the largest term is
//! always `exp(0) = 1`.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// `log Σ exp(v_i)` with max shifting.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = max_finite(v)?;
    if v.len() == 1 {
        return Ok(v[0]);
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `exp(v_i - log_sum_exp(v))`, i.e. a softmax over log scores.
pub fn softmax_from_logs(v: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(v)?;
    Ok(v.iter().map(|&x| (x - lse).exp()).collect())
}

fn max_finite(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty);
    }
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if !x.is_finite() {
            return Err(Error::NonFinite("log-domain vector"));
        }
        max = max.max(x);
    }
    Ok(max)
}

/// Stable `log(1 + exp(a))`.
#[inline]
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    let e = (-a.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if a >= 0.0 {
        r
    } else {
        e * r
    }
}

/// `log σ(a)`, never formed as the log of an underflowed sigmoid.
#[inline]
pub fn log_sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

/// `b·log σ(a) + (1−b)·log σ(−a)` for a bit `b ∈ {0, 1}`.
///
/// Uses the equivalent form `b·a − softplus(a)`, which needs one
/// transcendental evaluation.
#[inline]
pub fn bernoulli_log_prob(bit: f64, logit: f64) -> f64 {
    bit * logit - softplus(logit)
}

/// Independent Bernoulli draws, returned as `0.0` / `1.0`.
pub fn bernoulli_sample<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if let Some(&bad) = p.iter().find(|&&q| !(0.0..=1.0).contains(&q)) {
        return Err(Error::Probability(bad));
    }
    Ok(p.iter()
        .map(|&q| if rng.gen::<f64>() < q { 1.0 } else { 0.0 })
        .collect())
}

/// Checked matrix-vector product `m · v`.
pub fn mat_vec(m: &Array2<f64>, v: &Array1<f64>) -> Result<Array1<f64>> {
    if m.ncols() != v.len() {
        return Err(shape_err(format!(
            "matrix has {} columns, vector has {} entries",
            m.ncols(),
            v.len()
        )));
    }
    Ok(m.dot(v))
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|x| x.is_finite())
}

/// `‖a − b‖₂ / ‖b‖₂`, falling back to the absolute error when `b` is ~0.
pub fn relative_error(actual: &[f64], expected: &[f64]) -> f64 {
    let diff: f64 = actual
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = expected.iter().map(|b| b * b).sum::<f64>().sqrt();
    if norm < 1e-12 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_sum_exp_examples() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(log_sum_exp(&[-123.456]).unwrap(), -123.456);
        // 1 + 3 = 4
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 3f64.ln()]).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert!(matches!(log_sum_exp(&[]), Err(Error::Empty)));
        assert!(log_sum_exp(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_examples() {
        for c in [-500.0, 0.0, 3.7] {
            let w = softmax_from_logs(&[c; 4]).unwrap();
            for x in w {
                assert_abs_diff_eq!(x, 0.25, epsilon = 1e-15);
            }
        }
        let w = softmax_from_logs(&[0.0, 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(w[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.75, epsilon = 1e-15);
        assert_eq!(softmax_from_logs(&[0.0]).unwrap(), vec![1.0]);
        assert!(softmax_from_logs(&[]).is_err());
    }

    #[test]
    fn bernoulli_primitives() {
        let half = -(2f64.ln());
        assert_abs_diff_eq!(bernoulli_log_prob(1.0, 0.0), half, epsilon = 1e-15);
        assert_abs_diff_eq!(bernoulli_log_prob(0.0, 0.0), half, epsilon = 1e-15);
        let ls = log_sigmoid(-100.0);
        assert!(ls.is_finite());
        assert_abs_diff_eq!(ls, -100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(log_sigmoid(40.0), -(-40f64).exp(), epsilon = 1e-30);
        assert_eq!(sigmoid(0.0), 0.5);
        // matches the two-branch definition away from saturation
        for a in [-7.0, -0.3, 0.0, 2.5, 11.0] {
            let direct = log_sigmoid(a);
            assert_abs_diff_eq!(bernoulli_log_prob(1.0, a), direct, epsilon = 1e-13);
            assert_abs_diff_eq!(bernoulli_log_prob(0.0, a), log_sigmoid(-a), epsilon = 1e-13);
            assert_abs_diff_eq!(sigmoid(a), 1.0 / (1.0 + (-a).exp()), epsilon = 1e-15);
        }
    }

    #[test]
    fn bernoulli_sample_extremes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(bernoulli_sample(&[0.0; 16], &mut rng).unwrap(), vec![0.0; 16]);
        assert_eq!(bernoulli_sample(&[1.0; 16], &mut rng).unwrap(), vec![1.0; 16]);
        let p = vec![0.3; 64];
        let a = bernoulli_sample(&p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = bernoulli_sample(&p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            bernoulli_sample(&[0.5, 1.5], &mut rng),
            Err(Error::Probability(_))
        ));
    }

    #[test]
    fn mat_vec_checks_dims() {
        let m = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = Array1::from(vec![1.0, 0.0, -1.0]);
        assert_eq!(mat_vec(&m, &v).unwrap().to_vec(), vec![-2.0, -2.0]);
        assert!(mat_vec(&m, &Array1::zeros(2)).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-700.0f64..700.0, 1..40)) {
            let w = softmax_from_logs(&v).unwrap();
            let s: f64 = w.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn log_sum_exp_shift_equivariance(
            v in prop::collection::vec(-50.0f64..50.0, 1..30),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariance(
            v in prop::collection::vec(-50.0f64..50.0, 1..30),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax_from_logs(&v).unwrap();
            let b = softmax_from_logs(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
