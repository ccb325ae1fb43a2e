//! Adam, applied as gradient ascent.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// One moment buffer per parameter block of the given length.
    pub fn new(block_lens: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_blocks(blocks: &[&[f64]]) -> Self {
        Self::new(&blocks.iter().map(|b| b.len()).collect::<Vec<_>>())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, block by block.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let lens = |x: &[Vec<f64>]| x.iter().map(Vec::len).collect::<Vec<_>>();
        if lens(&m) != lens(&self.m) || lens(&v) != lens(&self.v) {
            return Err(shape_err("optimizer moments do not match parameter blocks"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// `params += lr · m̂ / (√v̂ + ε)` with bias-corrected moments of `grads`.
    pub fn ascend(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(format!(
                "optimizer has {} blocks, got {} parameter and {} gradient blocks",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(shape_err("parameter block length changed"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] += lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.5, -2.0, 0.25];
        let before = p.clone();
        let mut adam = Adam::new(&[3]);
        for _ in 0..5 {
            adam.ascend(&mut [&mut p], &[&[0.0; 3]], 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let g = [3.0, -0.02, 1e-3];
        let mut p = vec![0.0; 3];
        let mut adam = Adam::new(&[3]);
        adam.ascend(&mut [&mut p], &[&g], 0.1).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            assert_abs_diff_eq!(*pi, 0.1 * gi / (gi.abs() + 1e-8), epsilon = 1e-12);
        }
    }

    #[test]
    fn maximizes_a_concave_quadratic() {
        let mut p = vec![5.0, -3.0];
        let mut adam = Adam::new(&[2]);
        for _ in 0..3000 {
            let g = [-(p[0] - 1.0), -(p[1] + 2.0)];
            adam.ascend(&mut [&mut p], &[&g], 0.01).unwrap();
        }
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(p[1], -2.0, epsilon = 1e-3);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![0.3, 0.1];
            let mut adam = Adam::new(&[1, 1]);
            for i in 0..50 {
                let g0 = [(i as f64).sin()];
                let g1 = [(i as f64).cos()];
                let (a, b) = p.split_at_mut(1);
                adam.ascend(&mut [a, b], &[&g0, &g1], 1e-3).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::new(&[2]);
        let mut p = vec![0.0; 3];
        assert!(adam.ascend(&mut [&mut p], &[&[0.0; 3]], 1e-3).is_err());
        assert!(adam.ascend(&mut [], &[], 1e-3).is_err());
    }
}
