//! A small convolutional network with hand-written forward and backward passes.
//!
//! Samples are processed independently, so a batch forward is bit-identical to
//! per-sample forwards and gradient accumulation order depends only on sample
//! order, never on thread count.

mod arch;
mod checkpoint;
mod layers;
mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arch::{desk64, full64, tiny_check_net, ArchName};
pub use checkpoint::{load_model, read_model, save_model, write_model, CHECKPOINT_VERSION};
pub use train::{evaluate, history_csv, train, ArrayDataset, Dataset, EpochStats, TrainConfig};

use layers::{ConvGeom, PoolGeom};

/// Scalar type a network can run in.
pub trait Real:
    Float + FromPrimitive + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cast<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite cast")
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer stack: {0}")]
    InvalidSpec(String),
    #[error("dataset contains a single class")]
    SingleClassDataset,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
    },
    ReLU,
    Dropout {
        keep_prob: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding,
        }
    }

    pub fn pool(window: usize) -> Self {
        LayerSpec::MaxPool {
            window,
            stride: window,
        }
    }

    pub fn fc(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::FullyConnected { in_dim, out_dim }
    }

    /// `(weights, bias)` element counts.
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => (
                out_channels * in_channels * kernel_size * kernel_size,
                out_channels,
            ),
            LayerSpec::FullyConnected { in_dim, out_dim } => (in_dim * out_dim, out_dim),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels,
                kernel_size,
                ..
            } => in_channels * kernel_size * kernel_size,
            LayerSpec::FullyConnected { in_dim, .. } => in_dim,
            _ => 0,
        }
    }
}

/// `(channels, height, width)`; fully connected outputs are `(n, 1, 1)`.
pub type Shape = [usize; 3];

/// Output shape of every layer, or why the stack is inconsistent.
pub fn shape_check(layers: &[LayerSpec], input: Shape) -> Result<Vec<Shape>, NetError> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input;
    for (i, layer) in layers.iter().enumerate() {
        let err = |msg: String| NetError::InvalidSpec(format!("layer {i} ({layer:?}): {msg}"));
        cur = match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
            } => {
                if in_channels != cur[0] {
                    return Err(err(format!("expects {in_channels} channels, got {}", cur[0])));
                }
                if kernel_size == 0 || stride == 0 || out_channels == 0 {
                    return Err(err("zero-sized parameter".into()));
                }
                let (h, w) = (cur[1] + 2 * padding, cur[2] + 2 * padding);
                if h < kernel_size || w < kernel_size {
                    return Err(err(format!("kernel larger than padded input {h}x{w}")));
                }
                [
                    out_channels,
                    (h - kernel_size) / stride + 1,
                    (w - kernel_size) / stride + 1,
                ]
            }
            LayerSpec::MaxPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(err("zero-sized parameter".into()));
                }
                if cur[1] < window || cur[2] < window {
                    return Err(err(format!("window larger than input {}x{}", cur[1], cur[2])));
                }
                [
                    cur[0],
                    (cur[1] - window) / stride + 1,
                    (cur[2] - window) / stride + 1,
                ]
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                let n = cur[0] * cur[1] * cur[2];
                if in_dim != n {
                    return Err(err(format!("expects {in_dim} inputs, got {n}")));
                }
                if out_dim == 0 {
                    return Err(err("zero outputs".into()));
                }
                [out_dim, 1, 1]
            }
            LayerSpec::ReLU => cur,
            LayerSpec::Dropout { keep_prob } => {
                if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                    return Err(err(format!("keep_prob must lie in (0, 1], got {keep_prob}")));
                }
                cur
            }
            LayerSpec::Softmax => {
                if i + 1 != layers.len() {
                    return Err(err("softmax must be the final layer".into()));
                }
                if cur[1] != 1 || cur[2] != 1 || cur[0] < 2 {
                    return Err(err(format!("softmax needs a flat vector of >= 2, got {cur:?}")));
                }
                cur
            }
        };
        shapes.push(cur);
    }
    if layers.last() != Some(&LayerSpec::Softmax) {
        return Err(NetError::InvalidSpec("last layer must be Softmax".into()));
    }
    Ok(shapes)
}

/// Trainable tensors of one layer (empty for parameter-free layers).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    fn zeros_like(&self) -> Self {
        Self {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }
}

/// Per-layer gradients with exactly the shapes of the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &ConvNetModel<T>) -> Self {
        Self {
            layers: model.params.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, &y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, &y)| *x += y);
        }
    }

    fn scale(&mut self, c: T) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= c);
            l.bias.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn max_abs(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

/// Saved per-sample state needed by the backward pass.
struct Trace<T> {
    /// `acts[i]` is the input of layer `i`; the last entry is the softmax output.
    acts: Vec<Vec<T>>,
    pool_argmax: Vec<Vec<u32>>,
    dropout_masks: Vec<Vec<T>>,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed from a root seed and a path of integers.
pub(crate) fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[derive(Debug)]
pub struct ConvNetModel<T> {
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    input_shape: Shape,
    params: Vec<LayerParams<T>>,
    rng_seed: u64,
    pub training_mode: bool,
    dropout_passes: AtomicU64,
}

impl<T: Clone> Clone for ConvNetModel<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            input_shape: self.input_shape,
            params: self.params.clone(),
            rng_seed: self.rng_seed,
            training_mode: self.training_mode,
            dropout_passes: AtomicU64::new(self.dropout_passes.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Real> ConvNetModel<T> {
    /// He-initialized weights (Gaussian, std `sqrt(2 / fan_in)`), zero biases.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Shape, rng_seed: u64) -> Result<Self, NetError> {
        let shapes = shape_check(&layers, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &[0x1417]));
        let params = layers
            .iter()
            .map(|l| {
                let (nw, nb) = l.param_counts();
                let std = if nw > 0 { (2.0 / l.fan_in() as f64).sqrt() } else { 0.0 };
                LayerParams {
                    weights: (0..nw)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            cast(z * std)
                        })
                        .collect(),
                    bias: vec![T::zero(); nb],
                }
            })
            .collect();
        Ok(Self {
            layers,
            shapes,
            input_shape,
            params,
            rng_seed,
            training_mode: false,
            dropout_passes: AtomicU64::new(0),
        })
    }

    pub(crate) fn from_parts(
        layers: Vec<LayerSpec>,
        input_shape: Shape,
        params: Vec<LayerParams<T>>,
        rng_seed: u64,
    ) -> Result<Self, NetError> {
        let shapes = shape_check(&layers, input_shape)?;
        for (i, (l, p)) in layers.iter().zip(&params).enumerate() {
            if l.param_counts() != (p.weights.len(), p.bias.len()) {
                return Err(NetError::ShapeMismatch(format!(
                    "layer {i}: parameters {}+{} do not match {l:?}",
                    p.weights.len(),
                    p.bias.len()
                )));
            }
        }
        if params.len() != layers.len() {
            return Err(NetError::ShapeMismatch("parameter table length".into()));
        }
        Ok(Self {
            layers,
            shapes,
            input_shape,
            params,
            rng_seed,
            training_mode: false,
            dropout_passes: AtomicU64::new(0),
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    /// Same architecture and seed, parameters cast to another scalar type.
    pub fn cast<U: Real>(&self) -> ConvNetModel<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| cast::<U>(x.to_f64().unwrap())).collect();
        ConvNetModel {
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            input_shape: self.input_shape,
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weights: conv(&p.weights),
                    bias: conv(&p.bias),
                })
                .collect(),
            rng_seed: self.rng_seed,
            training_mode: self.training_mode,
            dropout_passes: AtomicU64::new(0),
        }
    }

    fn check_batch(&self, batch: &[T], n: usize) -> Result<(), NetError> {
        if batch.len() != n * self.input_len() {
            return Err(NetError::ShapeMismatch(format!(
                "batch has {} values, expected {n} x {:?}",
                batch.len(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn in_shape(&self, layer: usize) -> Shape {
        if layer == 0 {
            self.input_shape
        } else {
            self.shapes[layer - 1]
        }
    }

    fn conv_geom(&self, layer: usize) -> ConvGeom {
        let LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        } = self.layers[layer]
        else {
            unreachable!()
        };
        let i = self.in_shape(layer);
        let o = self.shapes[layer];
        ConvGeom {
            in_c: in_channels,
            out_c: out_channels,
            k: kernel_size,
            stride,
            pad: padding,
            in_h: i[1],
            in_w: i[2],
            out_h: o[1],
            out_w: o[2],
        }
    }

    fn pool_geom(&self, layer: usize) -> PoolGeom {
        let LayerSpec::MaxPool { window, stride } = self.layers[layer] else {
            unreachable!()
        };
        let i = self.in_shape(layer);
        let o = self.shapes[layer];
        PoolGeom {
            c: i[0],
            window,
            stride,
            in_h: i[1],
            in_w: i[2],
            out_h: o[1],
            out_w: o[2],
        }
    }

    /// Forward one sample. `dropout_seed` enables dropout with masks drawn from it.
    fn forward_sample(&self, input: &[T], dropout_seed: Option<u64>) -> Trace<T> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_argmax = vec![Vec::new(); self.layers.len()];
        let mut dropout_masks = vec![Vec::new(); self.layers.len()];
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        acts.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = acts.last().expect("input pushed");
            let y = match *layer {
                LayerSpec::Conv { .. } => {
                    let p = &self.params[i];
                    layers::conv_forward(&self.conv_geom(i), &p.weights, &p.bias, x)
                }
                LayerSpec::MaxPool { .. } => {
                    let (y, arg) = layers::maxpool_forward(&self.pool_geom(i), x);
                    pool_argmax[i] = arg;
                    y
                }
                LayerSpec::FullyConnected { in_dim, out_dim } => {
                    let p = &self.params[i];
                    layers::fc_forward(in_dim, out_dim, &p.weights, &p.bias, x)
                }
                LayerSpec::ReLU => x.iter().map(|&v| v.max(T::zero())).collect(),
                LayerSpec::Dropout { keep_prob } => match rng.as_mut() {
                    Some(rng) if keep_prob < 1.0 => {
                        let scale: T = cast(1.0 / keep_prob);
                        let mask: Vec<T> = (0..x.len())
                            .map(|_| {
                                if rng.random::<f64>() < keep_prob {
                                    scale
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                        dropout_masks[i] = mask;
                        y
                    }
                    _ => x.clone(),
                },
                LayerSpec::Softmax => layers::softmax(x),
            };
            acts.push(y);
        }
        Trace {
            acts,
            pool_argmax,
            dropout_masks,
        }
    }

    fn sample_dropout_seed(&self, pass: u64, sample: usize) -> u64 {
        derive_seed(self.rng_seed, &[0xD0, pass, sample as u64])
    }

    fn next_pass(&self) -> u64 {
        self.dropout_passes.fetch_add(1, Ordering::Relaxed)
    }

    /// Class probabilities for `n` samples laid out back to back.
    ///
    /// Dropout is active only when `training_mode` is set; each call then draws fresh masks.
    pub fn forward(&self, batch: &[T], n: usize) -> Result<Vec<Vec<T>>, NetError> {
        self.check_batch(batch, n)?;
        let pass = self.training_mode.then(|| self.next_pass());
        Ok(self.forward_with_pass(batch, n, pass))
    }

    pub(crate) fn forward_with_pass(&self, batch: &[T], n: usize, pass: Option<u64>) -> Vec<Vec<T>> {
        use rayon::prelude::*;
        let len = self.input_len();
        (0..n)
            .into_par_iter()
            .map(|s| {
                let seed = pass.map(|p| self.sample_dropout_seed(p, s));
                let mut trace = self.forward_sample(&batch[s * len..(s + 1) * len], seed);
                trace.acts.pop().expect("output")
            })
            .collect()
    }

    /// Raw values entering the softmax for one sample (inference mode).
    pub fn logits(&self, input: &[T]) -> Result<Vec<T>, NetError> {
        self.check_batch(input, 1)?;
        let mut trace = self.forward_sample(input, None);
        trace.acts.pop();
        Ok(trace.acts.pop().expect("softmax input"))
    }

    /// Mean cross-entropy and its gradient over a batch; dropout follows `training_mode`.
    pub fn backward(
        &self,
        batch: &[T],
        labels: &[usize],
    ) -> Result<(Gradients<T>, T), NetError> {
        let pass = self.training_mode.then(|| self.next_pass());
        self.loss_and_gradients(batch, labels, pass)
    }

    /// As [`backward`](Self::backward) with an explicit dropout pass id (`None` disables dropout).
    pub fn loss_and_gradients(
        &self,
        batch: &[T],
        labels: &[usize],
        pass: Option<u64>,
    ) -> Result<(Gradients<T>, T), NetError> {
        let (mut g, loss_sum, _) = self.gradient_sums(batch, labels, pass, 0)?;
        let n = labels.len();
        let inv: T = cast(1.0 / n as f64);
        g.scale(inv);
        Ok((g, loss_sum * inv))
    }

    /// Mean cross-entropy only.
    pub fn loss(&self, batch: &[T], labels: &[usize], pass: Option<u64>) -> Result<T, NetError> {
        self.validate_labels(batch, labels)?;
        let len = self.input_len();
        let mut total = T::zero();
        for (s, &label) in labels.iter().enumerate() {
            let seed = pass.map(|p| self.sample_dropout_seed(p, s));
            let trace = self.forward_sample(&batch[s * len..(s + 1) * len], seed);
            let logits = &trace.acts[trace.acts.len() - 2];
            total += layers::cross_entropy(logits, label);
        }
        Ok(total * cast(1.0 / labels.len() as f64))
    }

    fn validate_labels(&self, batch: &[T], labels: &[usize]) -> Result<(), NetError> {
        if labels.is_empty() {
            return Err(NetError::ShapeMismatch("empty batch".into()));
        }
        self.check_batch(batch, labels.len())?;
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NetError::ShapeMismatch(format!("label {bad} with {k} classes")));
        }
        Ok(())
    }

    /// Unscaled gradient and loss sums plus the count of correct argmax predictions.
    ///
    /// Samples are split into fixed chunks that run in parallel; chunk results are
    /// added in chunk order, so the result does not depend on the thread count.
    pub(crate) fn gradient_sums(
        &self,
        batch: &[T],
        labels: &[usize],
        pass: Option<u64>,
        sample_offset: usize,
    ) -> Result<(Gradients<T>, T, usize), NetError> {
        use rayon::prelude::*;
        const CHUNK: usize = 4;
        self.validate_labels(batch, labels)?;
        let len = self.input_len();
        let n = labels.len();
        let chunks: Vec<(Gradients<T>, T, usize)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = Gradients::zeros_like(self);
                let mut loss = T::zero();
                let mut correct = 0;
                for s in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let seed = pass.map(|p| self.sample_dropout_seed(p, sample_offset + s));
                    let (l, ok) =
                        self.accumulate_sample(&batch[s * len..(s + 1) * len], labels[s], seed, &mut g);
                    loss += l;
                    correct += ok as usize;
                }
                (g, loss, correct)
            })
            .collect();
        let mut iter = chunks.into_iter();
        let (mut g, mut loss, mut correct) = iter.next().expect("n >= 1");
        for (cg, cl, cc) in iter {
            g.add_assign(&cg);
            loss += cl;
            correct += cc;
        }
        Ok((g, loss, correct))
    }

    /// Adds this sample's loss gradient to `grads`; returns (loss, prediction correct).
    fn accumulate_sample(
        &self,
        input: &[T],
        label: usize,
        dropout_seed: Option<u64>,
        grads: &mut Gradients<T>,
    ) -> (T, bool) {
        let trace = self.forward_sample(input, dropout_seed);
        let nl = self.layers.len();
        let probs = &trace.acts[nl];
        let logits = &trace.acts[nl - 1];
        let loss = layers::cross_entropy(logits, label);
        let predicted = argmax(probs);

        // d loss / d logits = p - onehot
        let mut delta: Vec<T> = probs.clone();
        delta[label] = delta[label] - T::one();

        // the softmax layer is folded into the cross-entropy gradient
        for i in (0..nl - 1).rev() {
            let x = &trace.acts[i];
            let need_input = i > 0;
            delta = match self.layers[i] {
                LayerSpec::Conv { .. } => {
                    let g = &mut grads.layers[i];
                    match layers::conv_backward(
                        &self.conv_geom(i),
                        &self.params[i].weights,
                        x,
                        &delta,
                        &mut g.weights,
                        &mut g.bias,
                        need_input,
                    ) {
                        Some(d) => d,
                        None => break,
                    }
                }
                LayerSpec::FullyConnected { in_dim, out_dim } => {
                    let g = &mut grads.layers[i];
                    match layers::fc_backward(
                        in_dim,
                        out_dim,
                        &self.params[i].weights,
                        x,
                        &delta,
                        &mut g.weights,
                        &mut g.bias,
                        need_input,
                    ) {
                        Some(d) => d,
                        None => break,
                    }
                }
                LayerSpec::MaxPool { .. } => {
                    layers::maxpool_backward(x.len(), &trace.pool_argmax[i], &delta)
                }
                LayerSpec::ReLU => x
                    .iter()
                    .zip(&delta)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
                LayerSpec::Dropout { .. } => {
                    let mask = &trace.dropout_masks[i];
                    if mask.is_empty() {
                        delta
                    } else {
                        delta.iter().zip(mask).map(|(&d, &m)| d * m).collect()
                    }
                }
                LayerSpec::Softmax => unreachable!("softmax is last"),
            };
        }
        (loss, label == predicted)
    }
}

/// Largest relative difference between analytic gradients and central finite
/// differences `(L(w + eps) - L(w - eps)) / 2 eps`, over every parameter.
///
/// The dropout mask is pinned by `pass`. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(
    model: &ConvNetModel<f64>,
    batch: &[f64],
    labels: &[usize],
    pass: Option<u64>,
    eps: f64,
) -> Result<f64, NetError> {
    let (analytic, _) = model.loss_and_gradients(batch, labels, pass)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for l in 0..model.params.len() {
        for bias in [false, true] {
            let n = if bias { model.params[l].bias.len() } else { model.params[l].weights.len() };
            for i in 0..n {
                fn slot(m: &mut ConvNetModel<f64>, l: usize, bias: bool, i: usize) -> &mut f64 {
                    let p = &mut m.params[l];
                    if bias {
                        &mut p.bias[i]
                    } else {
                        &mut p.weights[i]
                    }
                }
                let orig = *slot(&mut probe, l, bias, i);
                *slot(&mut probe, l, bias, i) = orig + eps;
                let up = probe.loss(batch, labels, pass)?;
                *slot(&mut probe, l, bias, i) = orig - eps;
                let down = probe.loss(batch, labels, pass)?;
                *slot(&mut probe, l, bias, i) = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = if bias { analytic.layers[l].bias[i] } else { analytic.layers[l].weights[i] };
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

pub(crate) fn argmax<T: PartialOrd>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
