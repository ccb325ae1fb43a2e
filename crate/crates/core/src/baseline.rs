//! NVIL variance reduction: a running constant baseline, an input-dependent
//! baseline network and a running variance used to normalize the signal.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::optim::Adam;
use crate::rng::Rng;

pub const HIDDEN_UNITS: usize = 100;

/// `input → tanh(hidden) → scalar`. The output layer starts at zero so the
/// initial prediction is exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    /// length 1
    pub b2: Array1<f64>,
}

impl BaselineNet {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        Self {
            w1: Array2::from_shape_fn((hidden, input), |_| normal.sample(rng)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: Array1::zeros(1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    fn hidden(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if xs.ncols() != self.input_dim() {
            return Err(shape_err(format!(
                "baseline net expects {} inputs, got {}",
                self.input_dim(),
                xs.ncols()
            )));
        }
        let mut a = xs.dot(&self.w1.t());
        a += &self.b1;
        a.mapv_inplace(f64::tanh);
        Ok(a)
    }

    pub fn predict_batch(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.hidden(xs)?.dot(&self.w2) + self.b2[0])
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.predict_batch(x.insert_axis(Axis(0)))?[0])
    }

    /// `½ Σ_i (target_i − b(x_i))²` and its gradient, ordered like
    /// [`param_slices`](Self::param_slices).
    pub fn squared_residual_grad(&self, xs: ArrayView2<f64>, targets: ArrayView1<f64>) -> Result<(f64, Vec<Vec<f64>>)> {
        if xs.nrows() != targets.len() {
            return Err(shape_err("one target per input row is required"));
        }
        let hid = self.hidden(xs)?;
        let pred = hid.dot(&self.w2) + self.b2[0];
        let resid = &targets - &pred;
        let loss = 0.5 * resid.mapv(|r| r * r).sum();
        // ∂loss/∂pred = −r
        let dpred = resid.mapv(|r| -r);
        let gw2 = hid.t().dot(&dpred);
        let gb2 = dpred.sum();
        let mut dhid = dpred.insert_axis(Axis(1)).dot(&self.w2.view().insert_axis(Axis(0)));
        dhid.zip_mut_with(&hid, |d, &h| *d *= 1.0 - h * h);
        let gw1 = dhid.t().dot(&xs);
        let gb1 = dhid.sum_axis(Axis(0));
        Ok((
            loss,
            vec![
                gw1.iter().copied().collect(),
                gb1.to_vec(),
                gw2.to_vec(),
                vec![gb2],
            ],
        ))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    /// One Adam step that lowers the squared residual.
    pub fn fit_step(&mut self, adam: &mut Adam, xs: ArrayView2<f64>, targets: ArrayView1<f64>, lr: f64) -> Result<f64> {
        let (loss, mut grads) = self.squared_residual_grad(xs, targets)?;
        let n = targets.len().max(1) as f64;
        for g in &mut grads {
            g.iter_mut().for_each(|v| *v = -*v / n);
        }
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.ascend(&mut self.param_slices_mut(), &refs, lr)?;
        Ok(loss)
    }
}

/// Learning signals produced by one [`BaselineState::update`].
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredSignals {
    /// `b(x)` before the update
    pub predicted: Vec<f64>,
    /// `L̂ − b(x) − b`
    pub centered: Vec<f64>,
    /// `centered / max(1, √v)`
    pub normalized: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineState {
    /// constant baseline `b`
    pub constant: f64,
    /// running signal variance `v`
    pub variance: f64,
    /// EMA decay for `b` and `v`
    pub alpha: f64,
    pub net: BaselineNet,
    pub adam: Adam,
}

impl BaselineState {
    pub fn new(input: usize, rng: &mut Rng) -> Self {
        let net = BaselineNet::new(input, HIDDEN_UNITS, rng);
        let adam = Adam::for_blocks(&net.param_slices());
        Self {
            constant: 0.0,
            variance: 0.0,
            alpha: 0.9,
            net,
            adam,
        }
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.net.predict(x)
    }

    /// Processes one minibatch of raw bounds `L̂` for (centered) inputs `xs`.
    ///
    /// The constant baseline and variance move by EMA toward the batch mean
    /// and variance of `L̂ − b(x)`; the net then takes one step toward the
    /// residual target `L̂ − b`.
    pub fn update(&mut self, xs: ArrayView2<f64>, lhat: &[f64], lr: f64) -> Result<CenteredSignals> {
        if xs.nrows() != lhat.len() || lhat.is_empty() {
            return Err(shape_err("one bound per input row is required"));
        }
        let pred = self.net.predict_batch(xs)?;
        let minus_input: Vec<f64> = lhat.iter().zip(pred.iter()).map(|(l, p)| l - p).collect();
        let n = minus_input.len() as f64;
        let mean = minus_input.iter().sum::<f64>() / n;
        let var = minus_input.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        let a = self.alpha;
        self.constant = a * self.constant + (1.0 - a) * mean;
        self.variance = a * self.variance + (1.0 - a) * var;
        let scale = 1.0 / self.variance.sqrt().max(1.0);
        let centered: Vec<f64> = minus_input.iter().map(|c| c - self.constant).collect();
        let normalized = centered.iter().map(|c| c * scale).collect();
        let targets = Array1::from_iter(lhat.iter().map(|l| l - self.constant));
        self.net.fit_step(&mut self.adam, xs, targets.view(), lr)?;
        Ok(CenteredSignals {
            predicted: pred.to_vec(),
            centered,
            normalized,
        })
    }

    /// `1 / max(1, √v)`
    pub fn normalization(&self) -> f64 {
        1.0 / self.variance.sqrt().max(1.0)
    }
}
