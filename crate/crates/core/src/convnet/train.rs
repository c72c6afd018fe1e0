use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cast, derive_seed, layers, ConvNetModel, NetError, Real};

/// Labeled samples the trainer can read by index.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, i: usize) -> usize;
    /// Writes sample `i` into `out` (length = model input length).
    fn fill_input(&self, i: usize, out: &mut [f32]);
}

/// Flat in-memory dataset.
#[derive(Debug, Clone)]
pub struct ArrayDataset {
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub sample_len: usize,
}

impl Dataset for ArrayDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn fill_input(&self, i: usize, out: &mut [f32]) {
        out.copy_from_slice(&self.inputs[i * self.sample_len..(i + 1) * self.sample_len]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_owned()));
        // learning_rate 0 is allowed: it turns training into a no-op
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the whole training set after the epoch, dropout off.
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

fn gather<T: Real>(data: &dyn Dataset, idx: &[usize], len: usize) -> (Vec<T>, Vec<usize>) {
    let mut buf = vec![0f32; len];
    let mut out = Vec::with_capacity(idx.len() * len);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.fill_input(i, &mut buf);
        out.extend(buf.iter().map(|&v| cast::<T>(v as f64)));
        labels.push(data.label(i));
    }
    (out, labels)
}

/// Mean loss and accuracy over `data`, inference mode, summed in dataset order.
pub fn evaluate<T: Real>(model: &ConvNetModel<T>, data: &dyn Dataset) -> (f64, f64) {
    const CHUNK: usize = 32;
    let n = data.len();
    let len = model.input_len();
    let parts: Vec<(f64, usize)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let idx: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
            let (inputs, labels) = gather::<T>(data, &idx, len);
            let mut loss = 0.0;
            let mut correct = 0;
            for (s, &label) in labels.iter().enumerate() {
                let trace = model.forward_sample(&inputs[s * len..(s + 1) * len], None);
                let nl = trace.acts.len();
                loss += layers::cross_entropy(&trace.acts[nl - 2], label)
                    .to_f64()
                    .unwrap_or(f64::INFINITY);
                correct += (super::argmax(&trace.acts[nl - 1]) == label) as usize;
            }
            (loss, correct)
        })
        .collect();
    let (loss, correct) = parts
        .into_iter()
        .fold((0.0, 0), |(l, c), (pl, pc)| (l + pl, c + pc));
    (loss / n as f64, correct as f64 / n as f64)
}

/// Mini-batch SGD with momentum and L2 weight decay (weights only, not biases).
pub fn train<T: Real>(
    mut model: ConvNetModel<T>,
    data: &dyn Dataset,
    cfg: &TrainConfig,
) -> Result<(ConvNetModel<T>, Vec<EpochStats>), NetError> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(NetError::EmptyDataset);
    }
    let k = model.num_classes();
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let l = data.label(i);
        if l >= k {
            return Err(NetError::ShapeMismatch(format!("label {l} with {k} classes")));
        }
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(NetError::SingleClassDataset);
    }

    let len = model.input_len();
    let lr: T = cast(cfg.learning_rate);
    let mom: T = cast(cfg.momentum);
    let wd: T = cast(cfg.weight_decay);
    let mut velocity = super::Gradients::zeros_like(&model);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5F, epoch as u64]));
        order.shuffle(&mut rng);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (inputs, labels) = gather::<T>(data, idx, len);
            let pass = derive_seed(cfg.seed, &[0xD1, epoch as u64, step as u64]);
            let (mut grads, _, _) = model.gradient_sums(&inputs, &labels, Some(pass), 0)?;
            grads.scale(cast(1.0 / idx.len() as f64));
            for ((p, g), v) in model
                .params
                .iter_mut()
                .zip(&grads.layers)
                .zip(&mut velocity.layers)
            {
                for ((w, &gw), vw) in p.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
                    *vw = mom * *vw - lr * (gw + wd * *w);
                    *w += *vw;
                }
                for ((b, &gb), vb) in p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                    *vb = mom * *vb - lr * gb;
                    *b += *vb;
                }
            }
        }
        let (mean_loss, train_accuracy) = evaluate(&model, data);
        history.push(EpochStats {
            epoch,
            mean_loss,
            train_accuracy,
        });
    }
    model.training_mode = false;
    Ok((model, history))
}

/// CSV `epoch,mean_loss,train_accuracy`.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_loss,train_accuracy\n");
    for h in history {
        s.push_str(&format!("{},{:?},{:?}\n", h.epoch, h.mean_loss, h.train_accuracy));
    }
    s
}
