//! Sigmoid belief networks.
//!
//! A [`BernoulliNet`] is an ordered list of layers of Bernoulli units. Each
//! layer's logits are affine in one or more source blocks (a latent layer, the
//! context, or the observation), and layers are listed in ancestral sampling
//! order. The generative model ([`SbnModel`]) and the proposal
//! ([`SbnProposal`]) are both thin wrappers that fix the wiring.
//!
//! All evaluation is batched over rows: a [`Units`] value holds one row per
//! (case, sample) pair, which lets the training loop run every layer as a
//! single matrix product. The single-case methods are one-row batches.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::math::{bernoulli_log_prob, sigmoid};
use crate::rng::Rng;

/// Shape and row-major values of a stored tensor.
pub type NamedTensor = (Vec<usize>, Vec<f64>);

/// Logits are clamped to this range before computing sampling probabilities.
/// Log-probabilities and gradients always use the unclamped logits.
pub const SAMPLING_LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Latent(usize),
    Context,
    Observation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Latent(usize),
    Observation,
}

impl Source {
    fn tag(&self) -> String {
        match self {
            Source::Latent(i) => format!("latent{i}"),
            Source::Context => "context".into(),
            Source::Observation => "observation".into(),
        }
    }
}

/// A weight block feeding one layer. When `offset` is set the block sees
/// `source − offset` (used for input centering).
#[derive(Clone, Debug, PartialEq)]
pub struct InputBlock {
    pub source: Source,
    /// out-dim × in-dim
    pub weight: Array2<f64>,
    pub offset: Option<Array1<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub target: Target,
    pub bias: Array1<f64>,
    pub inputs: Vec<InputBlock>,
}

/// Unit counts shared by a model and its proposal. `context == 0` means the
/// model is unconditional.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims {
    pub latent: Vec<usize>,
    pub observation: usize,
    pub context: usize,
}

impl Dims {
    pub fn new(latent: &[usize], observation: usize, context: usize) -> Result<Self> {
        if latent.is_empty() || latent.contains(&0) || observation == 0 {
            return Err(Error::Config(format!(
                "need at least one non-empty latent layer and observation units, got {latent:?} / {observation}"
            )));
        }
        Ok(Self {
            latent: latent.to_vec(),
            observation,
            context,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.context > 0
    }

    pub fn total_latent_bits(&self) -> usize {
        self.latent.iter().sum()
    }

    fn source_dim(&self, s: Source) -> usize {
        match s {
            Source::Latent(i) => self.latent[i],
            Source::Context => self.context,
            Source::Observation => self.observation,
        }
    }

    fn target_dim(&self, t: Target) -> usize {
        match t {
            Target::Latent(i) => self.latent[i],
            Target::Observation => self.observation,
        }
    }
}

/// One bit-vector per latent layer, top layer first.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    pub layers: Vec<Array1<f64>>,
}

impl LatentStack {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.iter().map(|&n| Array1::zeros(n)).collect(),
        }
    }

    /// The configuration whose bits, read top layer first, spell `index` in
    /// little-endian binary.
    pub fn from_index(index: u64, sizes: &[usize]) -> Self {
        let mut bit = 0;
        let layers = sizes
            .iter()
            .map(|&n| {
                Array1::from_iter((0..n).map(|_| {
                    let v = ((index >> bit) & 1) as f64;
                    bit += 1;
                    v
                }))
            })
            .collect();
        Self { layers }
    }

    pub fn total_bits(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    fn check(&self, sizes: &[usize]) -> Result<()> {
        let ok = self.layers.len() == sizes.len()
            && self.layers.iter().zip(sizes).all(|(l, &n)| l.len() == n)
            && self.layers.iter().flatten().all(|&b| b == 0.0 || b == 1.0);
        if ok {
            Ok(())
        } else {
            Err(shape_err(format!(
                "latent stack does not match layer sizes {sizes:?} (or holds non-binary values)"
            )))
        }
    }
}

/// Batched unit values, one row per (case, sample).
#[derive(Clone, Debug)]
pub struct Units {
    pub context: Option<Array2<f64>>,
    pub observation: Option<Array2<f64>>,
    pub latents: Vec<Array2<f64>>,
}

impl Units {
    /// Zeroed latents ready to be filled by sampling.
    pub fn for_sampling(
        dims: &Dims,
        rows: usize,
        context: Option<Array2<f64>>,
        observation: Option<Array2<f64>>,
    ) -> Self {
        Self {
            context,
            observation,
            latents: dims.latent.iter().map(|&n| Array2::zeros((rows, n))).collect(),
        }
    }

    pub fn single(context: Option<&[f64]>, observation: Option<&[f64]>, h: &LatentStack) -> Self {
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
        Self {
            context: context.map(row),
            observation: observation.map(row),
            latents: h
                .layers
                .iter()
                .map(|l| l.view().insert_axis(Axis(0)).to_owned())
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.latents
            .first()
            .map(|l| l.nrows())
            .or_else(|| self.observation.as_ref().map(|o| o.nrows()))
            .unwrap_or(0)
    }

    /// The latent configuration stored in `row`.
    pub fn latent_row(&self, row: usize) -> LatentStack {
        LatentStack {
            layers: self.latents.iter().map(|l| l.row(row).to_owned()).collect(),
        }
    }

    fn source(&self, s: Source) -> Result<&Array2<f64>> {
        match s {
            Source::Latent(i) => self
                .latents
                .get(i)
                .ok_or_else(|| shape_err(format!("missing latent layer {i}"))),
            Source::Context => self.context.as_ref().ok_or(Error::Context("context required")),
            Source::Observation => self
                .observation
                .as_ref()
                .ok_or_else(|| shape_err("observation required")),
        }
    }

    fn target(&self, t: Target) -> Result<&Array2<f64>> {
        match t {
            Target::Latent(i) => self.source(Source::Latent(i)),
            Target::Observation => self.source(Source::Observation),
        }
    }

    fn target_mut(&mut self, t: Target) -> Result<&mut Array2<f64>> {
        match t {
            Target::Latent(i) => self
                .latents
                .get_mut(i)
                .ok_or_else(|| shape_err(format!("missing latent layer {i}"))),
            Target::Observation => self
                .observation
                .as_mut()
                .ok_or_else(|| shape_err("observation required")),
        }
    }
}

/// Cached logits for a contiguous range of layers.
#[derive(Clone, Debug)]
pub struct Forward {
    pub layers: Range<usize>,
    pub logits: Vec<Array2<f64>>,
}

/// Gradient (or any per-parameter quantity) shaped like a [`BernoulliNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrad {
    pub layers: Vec<LayerGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub bias: Array1<f64>,
    pub weights: Vec<Array2<f64>>,
}

impl NetGrad {
    pub fn zeros_like(net: &BernoulliNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    bias: Array1::zeros(l.bias.len()),
                    weights: l.inputs.iter().map(|b| Array2::zeros(b.weight.dim())).collect(),
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.bias.as_slice().expect("standard layout"));
            for w in &l.weights {
                out.push(w.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            for w in &mut l.weights {
                out.push(w.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_same_shape(&self, other: &NetGrad) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.bias.len() == b.bias.len()
                    && a.weights.len() == b.weights.len()
                    && a.weights.iter().zip(&b.weights).all(|(x, y)| x.dim() == y.dim())
            });
        if same {
            Ok(())
        } else {
            Err(shape_err("gradient blocks have different shapes"))
        }
    }

    /// `self += c · other`
    pub fn scaled_add(&mut self, c: f64, other: &NetGrad) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.bias.scaled_add(c, &b.bias);
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                x.scaled_add(c, y);
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliNet {
    dims: Dims,
    layers: Vec<LayerParams>,
}

impl BernoulliNet {
    /// Builds a zero-parameter net with the given wiring. Each entry of
    /// `wiring` is a target with its source list, in sampling order.
    pub fn new(dims: Dims, wiring: &[(Target, Vec<Source>)]) -> Result<Self> {
        let mut available: Vec<Source> = vec![Source::Observation];
        if dims.is_conditional() {
            available.push(Source::Context);
        }
        let mut layers = Vec::with_capacity(wiring.len());
        for (target, sources) in wiring {
            if let Target::Latent(i) = target {
                if *i >= dims.latent.len() {
                    return Err(shape_err(format!("no latent layer {i}")));
                }
            }
            let out = dims.target_dim(*target);
            let mut inputs = Vec::new();
            for &src in sources {
                let ok = match src {
                    Source::Latent(j) => j < dims.latent.len() && available.contains(&src),
                    Source::Context => dims.is_conditional(),
                    Source::Observation => true,
                };
                if !ok {
                    return Err(shape_err(format!(
                        "layer for {target:?} reads {src:?} before it is available"
                    )));
                }
                inputs.push(InputBlock {
                    source: src,
                    weight: Array2::zeros((out, dims.source_dim(src))),
                    offset: None,
                });
            }
            if let Target::Latent(i) = target {
                available.push(Source::Latent(*i));
            }
            layers.push(LayerParams {
                target: *target,
                bias: Array1::zeros(out),
                inputs,
            });
        }
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn all_layers(&self) -> Range<usize> {
        0..self.layers.len()
    }

    /// Weights ~ N(0, std²), biases zero.
    pub fn init_gaussian(&mut self, rng: &mut Rng, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for layer in &mut self.layers {
            layer.bias.fill(0.0);
            for block in &mut layer.inputs {
                block.weight.mapv_inplace(|_| normal.sample(rng));
            }
        }
    }

    /// Sets the centering offset on every block that reads `source`.
    pub fn set_offset(&mut self, source: Source, offset: Option<Array1<f64>>) -> Result<()> {
        if let Some(o) = &offset {
            if o.len() != self.dims.source_dim(source) {
                return Err(shape_err(format!("offset for {source:?} has wrong length")));
            }
        }
        for layer in &mut self.layers {
            for block in layer.inputs.iter_mut().filter(|b| b.source == source) {
                block.offset = offset.clone();
            }
        }
        Ok(())
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.bias.as_slice().expect("standard layout"));
            for b in &l.inputs {
                out.push(b.weight.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            for b in &mut l.inputs {
                out.push(b.weight.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape_err(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }

    /// `(name, shape, values)` for every parameter and centering offset.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("l{i}.bias"), vec![l.bias.len()], l.bias.to_vec()));
            for b in &l.inputs {
                let (r, c) = b.weight.dim();
                out.push((
                    format!("l{i}.w.{}", b.source.tag()),
                    vec![r, c],
                    b.weight.iter().copied().collect(),
                ));
                if let Some(o) = &b.offset {
                    out.push((format!("l{i}.offset.{}", b.source.tag()), vec![o.len()], o.to_vec()));
                }
            }
        }
        out
    }

    /// Inverse of [`named_tensors`](Self::named_tensors). Missing offsets are
    /// cleared; missing parameters are an error.
    pub fn load_named(&mut self, lookup: &dyn Fn(&str) -> Option<NamedTensor>) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = format!("l{i}.bias");
            let (shape, data) = lookup(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if shape != [l.bias.len()] {
                return Err(shape_err(format!("{name} has shape {shape:?}")));
            }
            l.bias = Array1::from(data);
            for b in &mut l.inputs {
                let name = format!("l{i}.w.{}", b.source.tag());
                let (shape, data) =
                    lookup(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
                let (r, c) = b.weight.dim();
                if shape != [r, c] {
                    return Err(shape_err(format!("{name} has shape {shape:?}")));
                }
                b.weight = Array2::from_shape_vec((r, c), data).map_err(|e| shape_err(e.to_string()))?;
                let oname = format!("l{i}.offset.{}", b.source.tag());
                b.offset = match lookup(&oname) {
                    Some((shape, data)) if shape == [c] => Some(Array1::from(data)),
                    Some((shape, _)) => return Err(shape_err(format!("{oname} has shape {shape:?}"))),
                    None => None,
                };
            }
        }
        Ok(())
    }

    fn check_units(&self, u: &Units) -> Result<usize> {
        let rows = u.rows();
        let check = |a: &Array2<f64>, n: usize, what: &str| -> Result<()> {
            if a.nrows() != rows || a.ncols() != n {
                return Err(shape_err(format!(
                    "{what}: expected {rows}×{n}, got {}×{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            Ok(())
        };
        if u.latents.len() != self.dims.latent.len() {
            return Err(shape_err("wrong number of latent layers"));
        }
        for (l, &n) in u.latents.iter().zip(&self.dims.latent) {
            check(l, n, "latent layer")?;
        }
        if let Some(o) = &u.observation {
            check(o, self.dims.observation, "observation")?;
        }
        match (&u.context, self.dims.is_conditional()) {
            (Some(c), true) => check(c, self.dims.context, "context")?,
            (None, false) => {}
            (Some(_), false) => return Err(Error::Context("context supplied to an unconditional model")),
            (None, true) => return Err(Error::Context("conditional model requires a context")),
        }
        Ok(rows)
    }

    fn layer_logits(&self, layer: usize, u: &Units) -> Result<Array2<f64>> {
        let l = &self.layers[layer];
        let rows = u.rows();
        let mut bias = l.bias.clone();
        for b in &l.inputs {
            if let Some(o) = &b.offset {
                bias -= &b.weight.dot(o);
            }
        }
        let mut a = Array2::from_shape_fn((rows, bias.len()), |(_, j)| bias[j]);
        for b in &l.inputs {
            let src = u.source(b.source)?;
            if src.ncols() != b.weight.ncols() {
                return Err(shape_err(format!("{:?} block width mismatch", b.source)));
            }
            ndarray::linalg::general_mat_mul(1.0, src, &b.weight.t(), 1.0, &mut a);
        }
        Ok(a)
    }

    fn check_range(&self, layers: &Range<usize>) -> Result<()> {
        if layers.end > self.layers.len() || layers.start > layers.end {
            return Err(shape_err(format!("layer range {layers:?} out of bounds")));
        }
        Ok(())
    }

    pub fn forward(&self, u: &Units, layers: Range<usize>) -> Result<Forward> {
        self.check_units(u)?;
        self.check_range(&layers)?;
        let logits = layers
            .clone()
            .map(|i| self.layer_logits(i, u))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward { layers, logits })
    }

    /// Per-row `Σ log p(target | sources)` over the cached layers.
    pub fn log_prob_cached(&self, fwd: &Forward, u: &Units) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(u.rows());
        for (i, a) in fwd.layers.clone().zip(&fwd.logits) {
            let t = u.target(self.layers[i].target)?;
            for (r, (trow, arow)) in t.outer_iter().zip(a.outer_iter()).enumerate() {
                out[r] += trow
                    .iter()
                    .zip(arow.iter())
                    .map(|(&bit, &logit)| bernoulli_log_prob(bit, logit))
                    .sum::<f64>();
            }
        }
        Ok(out)
    }

    pub fn log_prob(&self, u: &Units, layers: Range<usize>) -> Result<Array1<f64>> {
        let fwd = self.forward(u, layers)?;
        self.log_prob_cached(&fwd, u)
    }

    /// `grad += Σ_rows coef[row] · ∂/∂params log p(row)` over the cached layers.
    ///
    /// For logits `a = W z + b` and realized bits `t` the per-row terms are
    /// `∂/∂b = t − σ(a)` and `∂/∂W = (t − σ(a)) zᵀ`.
    pub fn accumulate_grad_cached(
        &self,
        fwd: &Forward,
        u: &Units,
        coef: ArrayView1<f64>,
        grad: &mut NetGrad,
    ) -> Result<()> {
        if coef.len() != u.rows() {
            return Err(shape_err(format!(
                "{} coefficients for {} rows",
                coef.len(),
                u.rows()
            )));
        }
        if grad.layers.len() != self.layers.len() {
            return Err(shape_err("gradient does not match network"));
        }
        for (i, a) in fwd.layers.clone().zip(&fwd.logits) {
            let layer = &self.layers[i];
            let t = u.target(layer.target)?;
            let mut delta = t - &a.mapv(sigmoid);
            for (mut row, &c) in delta.outer_iter_mut().zip(coef.iter()) {
                row *= c;
            }
            let g = &mut grad.layers[i];
            let dsum = delta.sum_axis(Axis(0));
            g.bias += &dsum;
            for (b, gw) in layer.inputs.iter().zip(g.weights.iter_mut()) {
                let src = u.source(b.source)?;
                ndarray::linalg::general_mat_mul(1.0, &delta.t(), src, 1.0, gw);
                if let Some(o) = &b.offset {
                    let outer = dsum
                        .view()
                        .insert_axis(Axis(1))
                        .dot(&o.view().insert_axis(Axis(0)));
                    *gw -= &outer;
                }
            }
        }
        Ok(())
    }

    pub fn accumulate_grad(
        &self,
        u: &Units,
        layers: Range<usize>,
        coef: ArrayView1<f64>,
        grad: &mut NetGrad,
    ) -> Result<()> {
        let fwd = self.forward(u, layers)?;
        self.accumulate_grad_cached(&fwd, u, coef, grad)
    }

    /// Ancestral sampling of the targets in `layers`, writing bits into `u`.
    ///
    /// `rngs` are assigned to contiguous row groups: with `n` rows and `m`
    /// generators, row `r` draws from `rngs[r / (n / m)]`. Returns per-row
    /// log-probabilities of the drawn bits plus the cached logits.
    pub fn sample(&self, u: &mut Units, layers: Range<usize>, rngs: &mut [Rng]) -> Result<(Array1<f64>, Forward)> {
        self.check_range(&layers)?;
        let rows = u.rows();
        if rngs.is_empty() || rows % rngs.len() != 0 {
            return Err(shape_err(format!(
                "{} rows cannot be split across {} generators",
                rows,
                rngs.len()
            )));
        }
        let per = rows / rngs.len();
        let mut logp = Array1::zeros(rows);
        let mut logits = Vec::new();
        for i in layers.clone() {
            let a = self.layer_logits(i, u)?;
            let target = u.target_mut(self.layers[i].target)?;
            for (r, (mut trow, arow)) in target.outer_iter_mut().zip(a.outer_iter()).enumerate() {
                let rng = &mut rngs[r / per];
                let mut lp = 0.0;
                for (t, &logit) in trow.iter_mut().zip(arow.iter()) {
                    let p = sigmoid(logit.clamp(-SAMPLING_LOGIT_CLAMP, SAMPLING_LOGIT_CLAMP));
                    *t = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
                    lp += bernoulli_log_prob(*t, logit);
                }
                logp[r] += lp;
            }
            logits.push(a);
        }
        self.check_units(u)?;
        Ok((logp, Forward { layers, logits }))
    }

    /// Bernoulli means of one layer given the current unit values.
    pub fn means(&self, layer: usize, u: &Units) -> Result<Array2<f64>> {
        Ok(self.layer_logits(layer, u)?.mapv(sigmoid))
    }
}

fn check_context(dims: &Dims, context: Option<&[f64]>) -> Result<()> {
    match (context, dims.is_conditional()) {
        (Some(c), true) if c.len() == dims.context => Ok(()),
        (Some(_), true) => Err(shape_err("context has wrong length")),
        (None, false) => Ok(()),
        (Some(_), false) => Err(Error::Context("context supplied to an unconditional model")),
        (None, true) => Err(Error::Context("conditional model requires a context")),
    }
}

fn check_observation(dims: &Dims, x: &[f64]) -> Result<()> {
    if x.len() != dims.observation {
        return Err(shape_err(format!(
            "observation has {} entries, model expects {}",
            x.len(),
            dims.observation
        )));
    }
    Ok(())
}

/// Generative SBN `P(x, h | c) = P(x | h, c) Π_l P(h_l | h_{l−1}, c)`.
///
/// Layer `l` of the net samples latent layer `l` (top first); the final layer
/// samples the observation. In a conditional model every layer, including
/// the observation layer, also reads the context.
#[derive(Clone, Debug, PartialEq)]
pub struct SbnModel {
    net: BernoulliNet,
}

impl SbnModel {
    pub fn new(latent: &[usize], observation: usize, context: usize) -> Result<Self> {
        let dims = Dims::new(latent, observation, context)?;
        let ctx: Vec<Source> = if context > 0 { vec![Source::Context] } else { vec![] };
        let mut wiring = Vec::new();
        for i in 0..latent.len() {
            let mut src = if i == 0 { vec![] } else { vec![Source::Latent(i - 1)] };
            src.extend(&ctx);
            wiring.push((Target::Latent(i), src));
        }
        let mut src = vec![Source::Latent(latent.len() - 1)];
        src.extend(&ctx);
        wiring.push((Target::Observation, src));
        Ok(Self {
            net: BernoulliNet::new(dims, &wiring)?,
        })
    }

    pub fn net(&self) -> &BernoulliNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut BernoulliNet {
        &mut self.net
    }

    pub fn dims(&self) -> &Dims {
        self.net.dims()
    }

    pub fn prior_layers(&self) -> Range<usize> {
        0..self.dims().latent.len()
    }

    pub fn likelihood_layers(&self) -> Range<usize> {
        let l = self.dims().latent.len();
        l..l + 1
    }

    /// Sets the observation bias to the logit of `means` (clamped away from
    /// 0 and 1).
    pub fn set_observation_bias_from_means(&mut self, means: ArrayView1<f64>) -> Result<()> {
        let obs = self.likelihood_layers().start;
        let layer = &mut self.net.layers_mut()[obs];
        if means.len() != layer.bias.len() {
            return Err(shape_err("pixel means have wrong length"));
        }
        layer.bias = means.mapv(|p| {
            let p = p.clamp(1e-3, 1.0 - 1e-3);
            (p / (1.0 - p)).ln()
        });
        Ok(())
    }

    fn units(&self, x: Option<&[f64]>, h: &LatentStack, context: Option<&[f64]>) -> Result<Units> {
        check_context(self.dims(), context)?;
        if let Some(x) = x {
            check_observation(self.dims(), x)?;
        }
        h.check(&self.dims().latent)?;
        Ok(Units::single(context, x, h))
    }

    pub fn log_joint(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<f64> {
        let u = self.units(Some(x), h, context)?;
        Ok(self.net.log_prob(&u, self.net.all_layers())?[0])
    }

    pub fn log_prior(&self, h: &LatentStack, context: Option<&[f64]>) -> Result<f64> {
        let u = self.units(None, h, context)?;
        Ok(self.net.log_prob(&u, self.prior_layers())?[0])
    }

    /// `log P(x | h, c)`
    pub fn log_likelihood(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<f64> {
        let u = self.units(Some(x), h, context)?;
        Ok(self.net.log_prob(&u, self.likelihood_layers())?[0])
    }

    fn grad_over(&self, x: Option<&[f64]>, h: &LatentStack, context: Option<&[f64]>, layers: Range<usize>) -> Result<NetGrad> {
        let u = self.units(x, h, context)?;
        let mut g = NetGrad::zeros_like(&self.net);
        self.net.accumulate_grad(&u, layers, Array1::ones(1).view(), &mut g)?;
        Ok(g)
    }

    pub fn grad_log_joint(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<NetGrad> {
        self.grad_over(Some(x), h, context, self.net.all_layers())
    }

    pub fn grad_log_prior(&self, h: &LatentStack, context: Option<&[f64]>) -> Result<NetGrad> {
        self.grad_over(None, h, context, self.prior_layers())
    }

    pub fn grad_log_likelihood(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<NetGrad> {
        self.grad_over(Some(x), h, context, self.likelihood_layers())
    }

    /// Ancestral top-down sample of the latents, plus the Bernoulli means of
    /// the observation layer given that sample.
    pub fn sample_prior(&self, rng: &mut Rng, context: Option<&[f64]>) -> Result<(LatentStack, Array1<f64>)> {
        check_context(self.dims(), context)?;
        let ctx = context.map(|c| Array2::from_shape_vec((1, c.len()), c.to_vec()).unwrap());
        let mut u = Units::for_sampling(self.dims(), 1, ctx, None);
        self.net
            .sample(&mut u, self.prior_layers(), std::slice::from_mut(rng))?;
        let means = self.net.means(self.likelihood_layers().start, &u)?;
        Ok((u.latent_row(0), means.row(0).to_owned()))
    }

    /// Draws `(h, x)` from the full model.
    pub fn sample_joint(&self, rng: &mut Rng, context: Option<&[f64]>) -> Result<(LatentStack, Array1<f64>)> {
        check_context(self.dims(), context)?;
        let ctx = context.map(|c| Array2::from_shape_vec((1, c.len()), c.to_vec()).unwrap());
        let obs = Array2::zeros((1, self.dims().observation));
        let mut u = Units::for_sampling(self.dims(), 1, ctx, Some(obs));
        self.net
            .sample(&mut u, self.net.all_layers(), std::slice::from_mut(rng))?;
        let x = u.observation.as_ref().unwrap().row(0).to_owned();
        Ok((u.latent_row(0), x))
    }
}

/// Learned proposal `Q(h | x[, c])`.
///
/// In generative mode the layers run upward: the observation feeds the bottom
/// latent layer and each layer feeds the one above. In SOP mode the proposal
/// mirrors the conditional prior (top-down, context into every layer) and
/// the final latent layer also reads the observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SbnProposal {
    net: BernoulliNet,
}

impl SbnProposal {
    pub fn new_generative(latent: &[usize], observation: usize) -> Result<Self> {
        let dims = Dims::new(latent, observation, 0)?;
        let top = latent.len() - 1;
        let mut wiring = vec![(Target::Latent(top), vec![Source::Observation])];
        for i in (0..top).rev() {
            wiring.push((Target::Latent(i), vec![Source::Latent(i + 1)]));
        }
        Ok(Self {
            net: BernoulliNet::new(dims, &wiring)?,
        })
    }

    pub fn new_sop(latent: &[usize], observation: usize, context: usize) -> Result<Self> {
        if context == 0 {
            return Err(Error::Config("SOP proposal needs a context".into()));
        }
        let dims = Dims::new(latent, observation, context)?;
        let last = latent.len() - 1;
        let wiring: Vec<_> = (0..latent.len())
            .map(|i| {
                let mut src = if i == 0 { vec![] } else { vec![Source::Latent(i - 1)] };
                src.push(Source::Context);
                if i == last {
                    src.push(Source::Observation);
                }
                (Target::Latent(i), src)
            })
            .collect();
        Ok(Self {
            net: BernoulliNet::new(dims, &wiring)?,
        })
    }

    pub fn net(&self) -> &BernoulliNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut BernoulliNet {
        &mut self.net
    }

    pub fn dims(&self) -> &Dims {
        self.net.dims()
    }

    /// Centers the proposal inputs by the given (training-split) means.
    pub fn set_input_centering(
        &mut self,
        observation_mean: Option<Array1<f64>>,
        context_mean: Option<Array1<f64>>,
    ) -> Result<()> {
        self.net.set_offset(Source::Observation, observation_mean)?;
        if self.dims().is_conditional() {
            self.net.set_offset(Source::Context, context_mean)?;
        }
        Ok(())
    }

    fn units(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<Units> {
        check_context(self.dims(), context)?;
        check_observation(self.dims(), x)?;
        h.check(&self.dims().latent)?;
        Ok(Units::single(context, Some(x), h))
    }

    pub fn log_q(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<f64> {
        let u = self.units(x, h, context)?;
        Ok(self.net.log_prob(&u, self.net.all_layers())?[0])
    }

    pub fn grad_log_q(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<NetGrad> {
        let u = self.units(x, h, context)?;
        let mut g = NetGrad::zeros_like(&self.net);
        self.net
            .accumulate_grad(&u, self.net.all_layers(), Array1::ones(1).view(), &mut g)?;
        Ok(g)
    }

    /// Draws `h ~ Q(h | x[, c])` and returns it with its exact log-probability.
    pub fn sample(&self, x: &[f64], rng: &mut Rng, context: Option<&[f64]>) -> Result<(LatentStack, f64)> {
        check_context(self.dims(), context)?;
        check_observation(self.dims(), x)?;
        let ctx = context.map(|c| Array2::from_shape_vec((1, c.len()), c.to_vec()).unwrap());
        let obs = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        let mut u = Units::for_sampling(self.dims(), 1, ctx, Some(obs));
        let (lq, _) = self
            .net
            .sample(&mut u, self.net.all_layers(), std::slice::from_mut(rng))?;
        Ok((u.latent_row(0), lq[0]))
    }
}

/// How per-sample scores `log f(x, h)` are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoringMode {
    /// `h ~ Q(h|x)`, `log f = log P(x, h) − log Q(h|x)`
    LearnedProposal,
    /// `h ~ P(h|c)`, `log f = log P(x | h, c)`
    PriorProposal,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Proposal {
    /// The model prior is the proposal.
    Prior,
    Learned(SbnProposal),
}

/// A generative model paired with the distribution its latents are sampled
/// from during training.
///
/// θ denotes the parameters the sampling distribution depends on: the
/// proposal net in learned mode, or the model's prior layers in prior mode.
/// ψ denotes the remaining model parameters. Both gradient blocks are
/// [`NetGrad`]s shaped like the net that owns them; in prior mode both are
/// shaped like the model and touch disjoint layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SbnSystem {
    pub model: SbnModel,
    pub proposal: Proposal,
}

/// K proposal samples for each of B cases, scored.
#[derive(Clone, Debug)]
pub struct ScoredBatch {
    pub cases: usize,
    pub k: usize,
    /// `cases · k` rows, case-major.
    pub units: Units,
    pub log_q: Array1<f64>,
    pub log_f: Array1<f64>,
    q_fwd: Forward,
    f_fwd: Forward,
}

impl ScoredBatch {
    pub fn case_log_f(&self, case: usize) -> &[f64] {
        let s = self.log_f.as_slice().expect("contiguous");
        &s[case * self.k..(case + 1) * self.k]
    }
}

impl SbnSystem {
    pub fn new(model: SbnModel, proposal: Proposal) -> Result<Self> {
        if let Proposal::Learned(q) = &proposal {
            let (m, p) = (model.dims(), q.dims());
            if m != p {
                return Err(shape_err(format!("model dims {m:?} vs proposal dims {p:?}")));
            }
        } else if !model.dims().is_conditional() {
            // Sampling unconditional latents from the prior is allowed; the
            // estimator just never sees the observation.
        }
        Ok(Self { model, proposal })
    }

    pub fn mode(&self) -> ScoringMode {
        match self.proposal {
            Proposal::Prior => ScoringMode::PriorProposal,
            Proposal::Learned(_) => ScoringMode::LearnedProposal,
        }
    }

    pub fn dims(&self) -> &Dims {
        self.model.dims()
    }

    /// The net that owns θ.
    pub fn theta_net(&self) -> &BernoulliNet {
        match &self.proposal {
            Proposal::Prior => self.model.net(),
            Proposal::Learned(q) => q.net(),
        }
    }

    pub fn theta_net_mut(&mut self) -> &mut BernoulliNet {
        match &mut self.proposal {
            Proposal::Prior => self.model.net_mut(),
            Proposal::Learned(q) => q.net_mut(),
        }
    }

    /// Layers of [`theta_net`](Self::theta_net) that belong to θ.
    pub fn theta_layers(&self) -> Range<usize> {
        match &self.proposal {
            Proposal::Prior => self.model.prior_layers(),
            Proposal::Learned(q) => q.net().all_layers(),
        }
    }

    /// Layers of the model that belong to ψ.
    pub fn psi_layers(&self) -> Range<usize> {
        match &self.proposal {
            Proposal::Prior => self.model.likelihood_layers(),
            Proposal::Learned(_) => self.model.net().all_layers(),
        }
    }

    pub fn zero_theta(&self) -> NetGrad {
        NetGrad::zeros_like(self.theta_net())
    }

    pub fn zero_psi(&self) -> NetGrad {
        NetGrad::zeros_like(self.model.net())
    }

    /// `log Q(h | x)`; the prior `log P(h | c)` in prior mode.
    pub fn log_q(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<f64> {
        match &self.proposal {
            Proposal::Prior => {
                check_observation(self.dims(), x)?;
                self.model.log_prior(h, context)
            }
            Proposal::Learned(q) => q.log_q(x, h, context),
        }
    }

    /// `log f(x, h)` under the scoring mode.
    pub fn log_f(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<f64> {
        match &self.proposal {
            Proposal::Prior => self.model.log_likelihood(x, h, context),
            Proposal::Learned(q) => Ok(self.model.log_joint(x, h, context)? - q.log_q(x, h, context)?),
        }
    }

    /// `∂ log Q(h|x) / ∂θ`
    pub fn grad_log_q(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<NetGrad> {
        match &self.proposal {
            Proposal::Prior => {
                check_observation(self.dims(), x)?;
                self.model.grad_log_prior(h, context)
            }
            Proposal::Learned(q) => q.grad_log_q(x, h, context),
        }
    }

    /// `∂ log f(x, h) / ∂θ`: `−∂ log Q / ∂θ` in learned mode, zero in prior mode.
    pub fn grad_log_f_theta(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<NetGrad> {
        match &self.proposal {
            Proposal::Prior => {
                self.model.log_likelihood(x, h, context)?;
                Ok(self.zero_theta())
            }
            Proposal::Learned(q) => {
                let mut g = q.grad_log_q(x, h, context)?;
                g.scale(-1.0);
                Ok(g)
            }
        }
    }

    /// `∂ log f(x, h) / ∂ψ`
    pub fn grad_log_f_psi(&self, x: &[f64], h: &LatentStack, context: Option<&[f64]>) -> Result<NetGrad> {
        match &self.proposal {
            Proposal::Prior => self.model.grad_log_likelihood(x, h, context),
            Proposal::Learned(_) => self.model.grad_log_joint(x, h, context),
        }
    }

    /// Draws `h` from the sampling distribution with its log-probability.
    pub fn sample_proposal(&self, x: &[f64], rng: &mut Rng, context: Option<&[f64]>) -> Result<(LatentStack, f64)> {
        match &self.proposal {
            Proposal::Prior => {
                check_observation(self.dims(), x)?;
                let (h, _) = self.model.sample_prior(rng, context)?;
                let lq = self.model.log_prior(&h, context)?;
                Ok((h, lq))
            }
            Proposal::Learned(q) => q.sample(x, rng, context),
        }
    }

    /// Draws `k` samples for every row of `xs` and scores them. Case `i`
    /// uses `rngs[i]`.
    pub fn sample_batch(
        &self,
        xs: ndarray::ArrayView2<f64>,
        contexts: Option<ndarray::ArrayView2<f64>>,
        k: usize,
        rngs: &mut [Rng],
    ) -> Result<ScoredBatch> {
        let cases = xs.nrows();
        if k == 0 {
            return Err(Error::SampleCount {
                k,
                reason: "at least one sample is required",
            });
        }
        if rngs.len() != cases {
            return Err(shape_err(format!("{} generators for {cases} cases", rngs.len())));
        }
        let repeat = |m: ndarray::ArrayView2<f64>| -> Array2<f64> {
            let mut out = Array2::zeros((m.nrows() * k, m.ncols()));
            for (i, row) in m.outer_iter().enumerate() {
                out.slice_mut(s![i * k..(i + 1) * k, ..]).assign(&row.broadcast((k, m.ncols())).unwrap());
            }
            out
        };
        let obs = repeat(xs);
        let ctx = contexts.map(repeat);
        let mut units = Units::for_sampling(self.dims(), cases * k, ctx, Some(obs));
        let (log_q, q_fwd, log_f, f_fwd) = match &self.proposal {
            Proposal::Prior => {
                let (lq, q_fwd) = self.model.net().sample(&mut units, self.model.prior_layers(), rngs)?;
                let f_fwd = self.model.net().forward(&units, self.model.likelihood_layers())?;
                let lf = self.model.net().log_prob_cached(&f_fwd, &units)?;
                (lq, q_fwd, lf, f_fwd)
            }
            Proposal::Learned(q) => {
                let (lq, q_fwd) = q.net().sample(&mut units, q.net().all_layers(), rngs)?;
                let f_fwd = self.model.net().forward(&units, self.model.net().all_layers())?;
                let lp = self.model.net().log_prob_cached(&f_fwd, &units)?;
                let lf = &lp - &lq;
                (lq, q_fwd, lf, f_fwd)
            }
        };
        Ok(ScoredBatch {
            cases,
            k,
            units,
            log_q,
            log_f,
            q_fwd,
            f_fwd,
        })
    }

    /// `Σ_rows coef[row] · ∂ log Q(h_row | x_row) / ∂θ`
    pub fn theta_grad_batch(&self, batch: &ScoredBatch, coef: ArrayView1<f64>, grad: &mut NetGrad) -> Result<()> {
        self.theta_net()
            .accumulate_grad_cached(&batch.q_fwd, &batch.units, coef, grad)
    }

    /// `Σ_rows coef[row] · ∂ log f(x_row, h_row) / ∂ψ`
    pub fn psi_grad_batch(&self, batch: &ScoredBatch, coef: ArrayView1<f64>, grad: &mut NetGrad) -> Result<()> {
        self.model
            .net()
            .accumulate_grad_cached(&batch.f_fwd, &batch.units, coef, grad)
    }

    /// Draws one `(h, x)` per generator from the model (with the matching
    /// context row, if any) and adds `Σ ∂ log Q(h|x)/∂θ` to `grad`.
    pub fn sleep_grad_batch(
        &self,
        contexts: Option<ndarray::ArrayView2<f64>>,
        rngs: &mut [Rng],
        grad: &mut NetGrad,
    ) -> Result<()> {
        let Proposal::Learned(q) = &self.proposal else {
            return Err(Error::Config("the sleep update needs a learned proposal".into()));
        };
        let rows = rngs.len();
        if let Some(c) = &contexts {
            if c.nrows() != rows {
                return Err(shape_err("one context row per generator is required"));
            }
        }
        let obs = Array2::zeros((rows, self.dims().observation));
        let mut units = Units::for_sampling(self.dims(), rows, contexts.map(|c| c.to_owned()), Some(obs));
        self.model.net().sample(&mut units, self.model.net().all_layers(), rngs)?;
        q.net()
            .accumulate_grad(&units, q.net().all_layers(), Array1::ones(rows).view(), grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::log_sum_exp;
    use crate::rng::RngTree;
    use approx::assert_abs_diff_eq;

    fn random_model(latent: &[usize], obs: usize, ctx: usize, seed: u64) -> SbnModel {
        let mut m = SbnModel::new(latent, obs, ctx).unwrap();
        let mut rng = RngTree::new(seed).stream(&[0]);
        m.net_mut().init_gaussian(&mut rng, 0.8);
        for s in m.net_mut().param_slices_mut() {
            for v in s.iter_mut() {
                *v += 0.3 * (rng.gen::<f64>() - 0.5);
            }
        }
        m
    }

    fn bits(n: usize, index: u64) -> Vec<f64> {
        (0..n).map(|i| ((index >> i) & 1) as f64).collect()
    }

    #[test]
    fn zero_model_means_are_half() {
        let m = SbnModel::new(&[3, 2], 5, 0).unwrap();
        let mut rng = RngTree::new(1).stream(&[]);
        let (h, means) = m.sample_prior(&mut rng, None).unwrap();
        assert_eq!(h.total_bits(), 5);
        assert!(means.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn saturated_model_is_deterministic() {
        let mut m = SbnModel::new(&[2, 3], 4, 0).unwrap();
        let pattern = [50.0, -50.0];
        m.net_mut().layers_mut()[0].bias = Array1::from(pattern.to_vec());
        m.net_mut().layers_mut()[1].bias = Array1::from(vec![-50.0, 50.0, 50.0]);
        for seed in 0..5 {
            let (h, _) = m.sample_prior(&mut RngTree::new(seed).stream(&[]), None).unwrap();
            assert_eq!(h.layers[0].to_vec(), vec![1.0, 0.0]);
            assert_eq!(h.layers[1].to_vec(), vec![0.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let m = random_model(&[4, 3], 6, 0, 3);
        let t = RngTree::new(11);
        let a = m.sample_prior(&mut t.stream(&[5]), None).unwrap();
        let b = m.sample_prior(&mut t.stream(&[5]), None).unwrap();
        assert_eq!(a, b);
        let mut q = SbnProposal::new_generative(&[4, 3], 6).unwrap();
        q.net_mut().init_gaussian(&mut t.stream(&[1]), 1.0);
        let x = bits(6, 0b101101);
        assert_eq!(
            q.sample(&x, &mut t.stream(&[2]), None).unwrap(),
            q.sample(&x, &mut t.stream(&[2]), None).unwrap()
        );
    }

    #[test]
    fn two_fair_coins() {
        let m = SbnModel::new(&[1], 1, 0).unwrap();
        for h in 0..2 {
            for x in 0..2 {
                let lj = m.log_joint(&[x as f64], &LatentStack::from_index(h, &[1]), None).unwrap();
                assert_abs_diff_eq!(lj, -2.0 * 2f64.ln(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn raising_bias_of_active_unit_raises_log_joint() {
        let m = random_model(&[2], 3, 0, 5);
        let h = LatentStack::from_index(0b01, &[2]);
        let x = bits(3, 0b110);
        let before = m.log_joint(&x, &h, None).unwrap();
        let mut m2 = m.clone();
        m2.net_mut().layers_mut()[0].bias[0] += 0.5;
        assert!(m2.log_joint(&x, &h, None).unwrap() > before);
    }

    #[test]
    fn weight_gradient_from_zero_model() {
        // t − σ(0) = 0.5 with parent activity 1
        let m = SbnModel::new(&[1], 1, 0).unwrap();
        let g = m.grad_log_joint(&[1.0], &LatentStack::from_index(1, &[1]), None).unwrap();
        assert_eq!(g.layers[1].weights[0][[0, 0]], 0.5);
        assert_eq!(g.layers[1].bias[0], 0.5);
        assert_eq!(g.layers[0].bias[0], 0.5);
    }

    #[test]
    fn inactive_parent_gives_zero_weight_column() {
        let m = random_model(&[3], 4, 0, 8);
        let h = LatentStack::from_index(0b010, &[3]);
        let g = m.grad_log_joint(&bits(4, 0b1011), &h, None).unwrap();
        let w = &g.layers[1].weights[0];
        for r in 0..4 {
            assert_eq!(w[[r, 0]], 0.0);
            assert_eq!(w[[r, 2]], 0.0);
        }
        assert!(w.column(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_proposal() {
        let q = SbnProposal::new_generative(&[3, 2], 4).unwrap();
        let x = bits(4, 0b0110);
        let (h, lq) = q.sample(&x, &mut RngTree::new(2).stream(&[]), None).unwrap();
        assert_abs_diff_eq!(lq, -5.0 * 2f64.ln(), epsilon = 1e-14);
        let g = q.grad_log_q(&x, &h, None).unwrap();
        for (layer, grad) in q.net().layers().iter().zip(&g.layers) {
            let t = match layer.target {
                Target::Latent(i) => &h.layers[i],
                Target::Observation => unreachable!(),
            };
            for (gb, tb) in grad.bias.iter().zip(t) {
                assert_eq!(*gb, tb - 0.5);
            }
        }
    }

    #[test]
    fn sampled_log_q_matches_log_q() {
        let mut q = SbnProposal::new_generative(&[3, 2], 5).unwrap();
        q.net_mut().init_gaussian(&mut RngTree::new(4).stream(&[]), 1.5);
        q.set_input_centering(Some(Array1::from_elem(5, 0.3)), None).unwrap();
        let x = bits(5, 0b10011);
        for i in 0..10 {
            let (h, lq) = q.sample(&x, &mut RngTree::new(9).stream(&[i]), None).unwrap();
            assert_abs_diff_eq!(lq, q.log_q(&x, &h, None).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn normalization_by_enumeration() {
        // 3 + 2 latent bits, 4 observed bits, 1 context bit: 10 binary variables
        let m = random_model(&[3, 2], 4, 1, 21);
        let mut q = SbnProposal::new_sop(&[3, 2], 4, 1).unwrap();
        q.net_mut().init_gaussian(&mut RngTree::new(22).stream(&[]), 1.0);
        q.set_input_centering(Some(Array1::from_elem(4, 0.4)), Some(Array1::from_elem(1, 0.5)))
            .unwrap();
        for c in [[0.0], [1.0]] {
            let mut joint = Vec::new();
            for xi in 0..16u64 {
                let x = bits(4, xi);
                let mut qs = Vec::new();
                for hi in 0..32u64 {
                    let h = LatentStack::from_index(hi, &[3, 2]);
                    joint.push(m.log_joint(&x, &h, Some(&c)).unwrap());
                    qs.push(q.log_q(&x, &h, Some(&c)).unwrap());
                }
                assert_abs_diff_eq!(log_sum_exp(&qs).unwrap().exp(), 1.0, epsilon = 1e-9);
            }
            assert_abs_diff_eq!(log_sum_exp(&joint).unwrap().exp(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zeroed_context_matches_unconditional() {
        let uncond = random_model(&[3, 2], 5, 0, 31);
        let mut cond = SbnModel::new(&[3, 2], 5, 4).unwrap();
        for (lc, lu) in cond.net_mut().layers_mut().iter_mut().zip(uncond.net().layers()) {
            lc.bias = lu.bias.clone();
            for block in lc.inputs.iter_mut() {
                if let Some(src) = lu.inputs.iter().find(|b| b.source == block.source) {
                    block.weight = src.weight.clone();
                }
            }
        }
        let ctx = [1.0, 0.0, 1.0, 1.0];
        let x = bits(5, 0b11010);
        for hi in 0..32 {
            let h = LatentStack::from_index(hi, &[3, 2]);
            assert_eq!(
                cond.log_joint(&x, &h, Some(&ctx)).unwrap().to_bits(),
                uncond.log_joint(&x, &h, None).unwrap().to_bits()
            );
        }
        let (hc, mc) = cond.sample_prior(&mut RngTree::new(3).stream(&[]), Some(&ctx)).unwrap();
        let (hu, mu) = uncond.sample_prior(&mut RngTree::new(3).stream(&[]), None).unwrap();
        assert_eq!(hc, hu);
        assert_eq!(mc, mu);
    }

    #[test]
    fn context_and_shape_errors() {
        let m = SbnModel::new(&[2], 3, 2).unwrap();
        let h = LatentStack::zeros(&[2]);
        let x = [0.0, 1.0, 0.0];
        assert!(matches!(m.log_joint(&x, &h, None), Err(Error::Context(_))));
        assert!(m.log_joint(&x, &h, Some(&[1.0, 0.0])).is_ok());
        let u = SbnModel::new(&[2], 3, 0).unwrap();
        assert!(matches!(u.log_joint(&x, &h, Some(&[1.0])), Err(Error::Context(_))));
        assert!(matches!(u.log_joint(&[0.0; 4], &h, None), Err(Error::Shape(_))));
        assert!(matches!(u.log_joint(&x, &LatentStack::zeros(&[3]), None), Err(Error::Shape(_))));
        assert!(u.sample_prior(&mut RngTree::new(0).stream(&[]), Some(&[1.0])).is_err());
    }

    #[test]
    fn batch_scores_match_single_case() {
        let m = random_model(&[3, 2], 6, 0, 41);
        let mut q = SbnProposal::new_generative(&[3, 2], 6).unwrap();
        q.net_mut().init_gaussian(&mut RngTree::new(42).stream(&[]), 1.0);
        let sys = SbnSystem::new(m, Proposal::Learned(q)).unwrap();
        let xs = Array2::from_shape_fn((3, 6), |(i, j)| ((i + j) % 2) as f64);
        let mut rngs: Vec<_> = (0..3).map(|i| RngTree::new(5).stream(&[i])).collect();
        let b = sys.sample_batch(xs.view(), None, 4, &mut rngs).unwrap();
        for r in 0..12 {
            let h = b.units.latent_row(r);
            let x = xs.row(r / 4).to_vec();
            assert_abs_diff_eq!(b.log_q[r], sys.log_q(&x, &h, None).unwrap(), epsilon = 1e-12);
            assert_abs_diff_eq!(b.log_f[r], sys.log_f(&x, &h, None).unwrap(), epsilon = 1e-12);
        }
    }
}
