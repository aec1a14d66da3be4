//! From-scratch 1-D convolutional classifier over fingerprint features.
//!
//! Architecture: three stages of Conv1d -> BatchNorm -> ReLU -> MaxPool, a
//! fourth Conv1d -> ReLU, then two dense layers and a softmax. Training is
//! plain Adam with decoupled weight decay, cross-entropy loss, and a learning
//! rate halved every epoch. Everything is written directly against flat
//! arrays so the same code runs in `f32` for training speed and in `f64`
//! for the finite-difference gradient oracle.
//!
//! Parameters live in a fixed 18-tensor catalogue (conv weights, conv
//! biases, BN gains, BN shifts, dense weights, dense biases); the optimizer,
//! the gradient checker, and the checkpoint exporter all walk that catalogue
//! in the same order, which keeps them trivially in sync.

use crate::features::RffFeature;
use crate::seed;
use num_traits::{Float, FromPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use thiserror::Error;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Central-difference step for the gradient oracle (64-bit arithmetic).
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Gradients smaller than this on both sides count as matching zeros.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Floating-point element type the network runs on.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn fl<F: Scalar>(v: f64) -> F {
    <F as FromPrimitive>::from_f64(v).expect("finite literal")
}

fn as_f64<F: Scalar>(v: F) -> f64 {
    v.to_f64().expect("finite value")
}

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("feature length {got} does not match model input length {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: usize, num_classes: usize },
    #[error("got {features} features but {labels} labels")]
    CountMismatch { features: usize, labels: usize },
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}; try a smaller learning rate")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint tensor mismatch: {0}")]
    TensorMismatch(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub input_length: usize,
    pub num_classes: usize,
    pub conv_channels: [usize; 4],
    pub kernel_size: usize,
    pub pool_size: usize,
    pub fc_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default shape: the smallest standard sizes that keep a 128-length
    /// input alive through three halving pools (128 -> 64 -> 32 -> 16).
    pub fn new(num_classes: usize) -> Self {
        Self {
            input_length: 128,
            num_classes,
            conv_channels: [32, 64, 128, 128],
            kernel_size: 3,
            pool_size: 2,
            fc_hidden: 128,
            seed: 0,
        }
    }

    /// Slimmed-down shape for large sweeps; same topology, fewer channels.
    pub fn compact(num_classes: usize) -> Self {
        Self { conv_channels: [8, 16, 24, 24], fc_hidden: 48, ..Self::new(num_classes) }
    }

    /// Sequence lengths entering each conv stage plus the final length:
    /// `[l0, l1, l2, l3, l3]` where l_{s+1} = l_s / pool for the first three.
    fn stage_lengths(&self) -> Result<[usize; 5], ClassifierError> {
        let mut lens = [0usize; 5];
        lens[0] = self.input_length;
        for s in 0..3 {
            lens[s + 1] = lens[s] / self.pool_size;
            if lens[s + 1] == 0 {
                return Err(ClassifierError::BadConfig(format!(
                    "pooling stage {} reduces the sequence to length 0",
                    s + 1
                )));
            }
        }
        lens[4] = lens[3];
        Ok(lens)
    }

    fn validate(&self) -> Result<(), ClassifierError> {
        if self.num_classes < 2 {
            return Err(ClassifierError::BadConfig("need at least 2 classes".into()));
        }
        if self.input_length == 0 {
            return Err(ClassifierError::BadConfig("input length must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(ClassifierError::BadConfig(
                "kernel size must be odd so same-padding is symmetric".into(),
            ));
        }
        if self.pool_size < 2 {
            return Err(ClassifierError::BadConfig("pool size must be at least 2".into()));
        }
        if self.conv_channels.iter().any(|&c| c == 0) || self.fc_hidden == 0 {
            return Err(ClassifierError::BadConfig("layer widths must be positive".into()));
        }
        self.stage_lengths().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early-stop patience on validation loss; `None` disables early stopping.
    pub patience: Option<usize>,
    /// Fraction of samples held out for validation (0 disables the split).
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 1e-4,
            lr_decay_per_epoch: 0.5,
            batch_size: 64,
            epochs: 15,
            patience: Some(5),
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Per-class probabilities from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxScores {
    pub scores: Vec<f64>,
}

impl SoftmaxScores {
    /// Index of the largest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// The 18 trainable tensors in a fixed order. Indices 0..4 conv weights,
/// 4..8 conv biases, 8..11 BN gains, 11..14 BN shifts, 14..16 dense weights,
/// 16..18 dense biases.
#[derive(Debug, Clone)]
struct ParamSet<F> {
    tensors: Vec<Vec<F>>,
}

const T_CONV_W: usize = 0;
const T_CONV_B: usize = 4;
const T_BN_GAMMA: usize = 8;
const T_BN_BETA: usize = 11;
const T_FC_W: usize = 14;
const T_FC_B: usize = 16;
const NUM_TENSORS: usize = 18;

/// Decoupled weight decay touches only the multiplicative weights.
fn is_weight_tensor(i: usize) -> bool {
    i < T_CONV_B || i == T_FC_W || i == T_FC_W + 1
}

fn tensor_name(i: usize) -> String {
    match i {
        _ if i < T_CONV_B => format!("conv{}.weight", i - T_CONV_W + 1),
        _ if i < T_BN_GAMMA => format!("conv{}.bias", i - T_CONV_B + 1),
        _ if i < T_BN_BETA => format!("bn{}.gamma", i - T_BN_GAMMA + 1),
        _ if i < T_FC_W => format!("bn{}.beta", i - T_BN_BETA + 1),
        _ if i < T_FC_B => format!("fc{}.weight", i - T_FC_W + 1),
        _ => format!("fc{}.bias", i - T_FC_B + 1),
    }
}

impl<F: Scalar> ParamSet<F> {
    fn zeros_like(other: &ParamSet<F>) -> Self {
        Self { tensors: other.tensors.iter().map(|t| vec![F::zero(); t.len()]).collect() }
    }

    fn conv_w(&self, s: usize) -> &[F] {
        &self.tensors[T_CONV_W + s]
    }

    fn conv_b(&self, s: usize) -> &[F] {
        &self.tensors[T_CONV_B + s]
    }

    fn bn_gamma(&self, s: usize) -> &[F] {
        &self.tensors[T_BN_GAMMA + s]
    }

    fn bn_beta(&self, s: usize) -> &[F] {
        &self.tensors[T_BN_BETA + s]
    }

    fn fc_w(&self, j: usize) -> &[F] {
        &self.tensors[T_FC_W + j]
    }

    fn fc_b(&self, j: usize) -> &[F] {
        &self.tensors[T_FC_B + j]
    }
}

/// Batch-major activation block: `data[((b*channels)+c)*len + t]`.
#[derive(Debug, Clone)]
struct Planes<F> {
    data: Vec<F>,
    batch: usize,
    channels: usize,
    len: usize,
}

impl<F: Scalar> Planes<F> {
    fn zeros(batch: usize, channels: usize, len: usize) -> Self {
        Self { data: vec![F::zero(); batch * channels * len], batch, channels, len }
    }

    fn plane(&self, b: usize, c: usize) -> &[F] {
        let i = (b * self.channels + c) * self.len;
        &self.data[i..i + self.len]
    }

    fn plane_mut(&mut self, b: usize, c: usize) -> &mut [F] {
        let i = (b * self.channels + c) * self.len;
        &mut self.data[i..i + self.len]
    }

    /// All channels of one batch element as a single contiguous row.
    fn flat(&self, b: usize) -> &[F] {
        let n = self.channels * self.len;
        &self.data[b * n..(b + 1) * n]
    }
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    cfg: ModelConfig,
    params: ParamSet<F>,
    running_mean: Vec<Vec<F>>,
    running_var: Vec<Vec<F>>,
    lens: [usize; 5],
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

impl<F: Scalar> Model<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_parameters(&self) -> usize {
        self.params.tensors.iter().map(|t| t.len()).sum()
    }

    fn stage_channels(&self, s: usize) -> (usize, usize) {
        let cin = if s == 0 { 1 } else { self.cfg.conv_channels[s - 1] };
        (cin, self.cfg.conv_channels[s])
    }

    fn flat_dim(&self) -> usize {
        self.cfg.conv_channels[3] * self.lens[4]
    }

    /// Inference on one feature using running BN statistics.
    pub fn forward(&self, feature: &RffFeature) -> Result<SoftmaxScores, ClassifierError> {
        if feature.len() != self.cfg.input_length {
            return Err(ClassifierError::ShapeMismatch {
                expected: self.cfg.input_length,
                got: feature.len(),
            });
        }
        let x0 = batch_input(&[feature], self.cfg.input_length)?;
        let (pass, _) = forward_batch(self, x0, Mode::Eval);
        Ok(SoftmaxScores { scores: pass.probs.plane(0, 0).iter().map(|&p| as_f64(p)).collect() })
    }

    /// Trainable tensors plus BN running statistics, in checkpoint order.
    pub fn export_tensors(&self) -> Vec<(String, Vec<f32>)> {
        let mut out: Vec<(String, Vec<f32>)> = self
            .params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (tensor_name(i), t.iter().map(|&v| as_f64(v) as f32).collect()))
            .collect();
        for s in 0..3 {
            out.push((
                format!("bn{}.running_mean", s + 1),
                self.running_mean[s].iter().map(|&v| as_f64(v) as f32).collect(),
            ));
            out.push((
                format!("bn{}.running_var", s + 1),
                self.running_var[s].iter().map(|&v| as_f64(v) as f32).collect(),
            ));
        }
        out
    }

    /// Loads tensors exported by [`Model::export_tensors`]; names and shapes
    /// must match this model's configuration exactly.
    pub fn import_tensors(&mut self, tensors: &[(String, Vec<f32>)]) -> Result<(), ClassifierError> {
        let expected = self.export_tensors();
        if tensors.len() != expected.len() {
            return Err(ClassifierError::TensorMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, values), (want_name, want_values)) in tensors.iter().zip(&expected) {
            if name != want_name {
                return Err(ClassifierError::TensorMismatch(format!(
                    "expected tensor {want_name}, got {name}"
                )));
            }
            if values.len() != want_values.len() {
                return Err(ClassifierError::TensorMismatch(format!(
                    "tensor {name} has {} values, expected {}",
                    values.len(),
                    want_values.len()
                )));
            }
        }
        for (i, (_, values)) in tensors.iter().take(NUM_TENSORS).enumerate() {
            self.params.tensors[i] = values.iter().map(|&v| fl(v as f64)).collect();
        }
        for s in 0..3 {
            self.running_mean[s] =
                tensors[NUM_TENSORS + 2 * s].1.iter().map(|&v| fl(v as f64)).collect();
            self.running_var[s] =
                tensors[NUM_TENSORS + 2 * s + 1].1.iter().map(|&v| fl(v as f64)).collect();
        }
        Ok(())
    }
}

/// Builds a model with He-uniform weights and zero biases, deterministically
/// from `cfg.seed`.
pub fn build_model<F: Scalar>(cfg: &ModelConfig) -> Result<Model<F>, ClassifierError> {
    cfg.validate()?;
    let lens = cfg.stage_lengths()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, &[0x6d6f64656c]));
    let k = cfg.kernel_size;

    let mut tensors: Vec<Vec<F>> = vec![Vec::new(); NUM_TENSORS];
    let mut he_uniform = |n: usize, fan_in: usize| -> Vec<F> {
        let limit = (6.0 / fan_in as f64).sqrt();
        (0..n).map(|_| fl(rng.gen_range(-limit..limit))).collect()
    };
    for s in 0..4 {
        let cin = if s == 0 { 1 } else { cfg.conv_channels[s - 1] };
        let cout = cfg.conv_channels[s];
        tensors[T_CONV_W + s] = he_uniform(cout * cin * k, cin * k);
        tensors[T_CONV_B + s] = vec![F::zero(); cout];
    }
    let flat = cfg.conv_channels[3] * lens[4];
    tensors[T_FC_W] = he_uniform(cfg.fc_hidden * flat, flat);
    tensors[T_FC_B] = vec![F::zero(); cfg.fc_hidden];
    tensors[T_FC_W + 1] = he_uniform(cfg.num_classes * cfg.fc_hidden, cfg.fc_hidden);
    tensors[T_FC_B + 1] = vec![F::zero(); cfg.num_classes];
    for s in 0..3 {
        tensors[T_BN_GAMMA + s] = vec![F::one(); cfg.conv_channels[s]];
        tensors[T_BN_BETA + s] = vec![F::zero(); cfg.conv_channels[s]];
    }

    Ok(Model {
        cfg: cfg.clone(),
        params: ParamSet { tensors },
        running_mean: (0..3).map(|s| vec![F::zero(); cfg.conv_channels[s]]).collect(),
        running_var: (0..3).map(|s| vec![F::one(); cfg.conv_channels[s]]).collect(),
        lens,
    })
}

/// See [`Model::forward`].
pub fn forward<F: Scalar>(
    model: &Model<F>,
    feature: &RffFeature,
) -> Result<SoftmaxScores, ClassifierError> {
    model.forward(feature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Eval,
}

/// Everything the backward pass needs from one forward pass.
struct Pass<F> {
    x0: Planes<F>,
    // Per BN stage: normalized activations, batch 1/std, pre-ReLU values,
    // pool winners (flat source indices), pooled output.
    xhat: Vec<Planes<F>>,
    inv_std: Vec<Vec<F>>,
    pre_relu: Vec<Planes<F>>,
    argmax: Vec<Vec<usize>>,
    pooled: Vec<Planes<F>>,
    c4_pre: Planes<F>,
    r4: Planes<F>,
    fc1_pre: Planes<F>,
    fc1_post: Planes<F>,
    logits: Planes<F>,
    probs: Planes<F>,
}

fn conv_forward<F: Scalar>(
    w: &[F],
    bias: &[F],
    in_ch: usize,
    out_ch: usize,
    k: usize,
    x: &Planes<F>,
) -> Planes<F> {
    let pad = k / 2;
    let l = x.len;
    let mut y = Planes::zeros(x.batch, out_ch, l);
    for b in 0..x.batch {
        for o in 0..out_ch {
            let yr = y.plane_mut(b, o);
            yr.fill(bias[o]);
            for c in 0..in_ch {
                let xr = x.plane(b, c);
                let wr = &w[(o * in_ch + c) * k..][..k];
                for (dk, &wv) in wr.iter().enumerate() {
                    let off = dk as isize - pad as isize;
                    let t_lo = (-off).max(0) as usize;
                    let t_hi = ((l as isize - off).min(l as isize)).max(0) as usize;
                    for t in t_lo..t_hi {
                        yr[t] += wv * xr[(t as isize + off) as usize];
                    }
                }
            }
        }
    }
    y
}

/// Returns (dw, db, dx) for the layer that produced `dy` from `x`.
fn conv_backward<F: Scalar>(
    w: &[F],
    in_ch: usize,
    out_ch: usize,
    k: usize,
    x: &Planes<F>,
    dy: &Planes<F>,
) -> (Vec<F>, Vec<F>, Planes<F>) {
    let pad = k / 2;
    let l = x.len;
    let mut dw = vec![F::zero(); w.len()];
    let mut db = vec![F::zero(); out_ch];
    let mut dx = Planes::zeros(x.batch, in_ch, l);
    for b in 0..x.batch {
        for o in 0..out_ch {
            let dyr = dy.plane(b, o);
            db[o] += dyr.iter().copied().sum::<F>();
            for c in 0..in_ch {
                let xr = x.plane(b, c);
                let dxr = dx.plane_mut(b, c);
                let wbase = (o * in_ch + c) * k;
                for dk in 0..k {
                    let off = dk as isize - pad as isize;
                    let t_lo = (-off).max(0) as usize;
                    let t_hi = ((l as isize - off).min(l as isize)).max(0) as usize;
                    let mut acc = F::zero();
                    let wv = w[wbase + dk];
                    for t in t_lo..t_hi {
                        let s = (t as isize + off) as usize;
                        acc += dyr[t] * xr[s];
                        dxr[s] += wv * dyr[t];
                    }
                    dw[wbase + dk] += acc;
                }
            }
        }
    }
    (dw, db, dx)
}

/// BN forward. Train mode normalizes with batch statistics and reports the
/// running-average update (mean, unbiased variance); eval mode uses the
/// stored running statistics.
#[allow(clippy::too_many_arguments)]
fn bn_forward<F: Scalar>(
    gamma: &[F],
    beta: &[F],
    running_mean: &[F],
    running_var: &[F],
    x: &Planes<F>,
    mode: Mode,
) -> (Planes<F>, Planes<F>, Vec<F>, Option<(Vec<F>, Vec<F>)>) {
    let n = x.batch * x.len;
    let mut xhat = Planes::zeros(x.batch, x.channels, x.len);
    let mut y = Planes::zeros(x.batch, x.channels, x.len);
    let mut inv_std = vec![F::zero(); x.channels];
    let mut update = if mode == Mode::Train {
        Some((vec![F::zero(); x.channels], vec![F::zero(); x.channels]))
    } else {
        None
    };
    for c in 0..x.channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = F::zero();
                for b in 0..x.batch {
                    sum += x.plane(b, c).iter().copied().sum::<F>();
                }
                let mean = sum / fl(n as f64);
                let mut sq = F::zero();
                for b in 0..x.batch {
                    for &v in x.plane(b, c) {
                        sq += (v - mean) * (v - mean);
                    }
                }
                (mean, sq / fl(n as f64))
            }
            Mode::Eval => (running_mean[c], running_var[c]),
        };
        let istd = F::one() / (var + fl(BN_EPS)).sqrt();
        inv_std[c] = istd;
        if let Some((mu, uv)) = update.as_mut() {
            mu[c] = mean;
            // Running variance keeps the unbiased estimate.
            uv[c] = if n > 1 { var * fl(n as f64 / (n as f64 - 1.0)) } else { var };
        }
        for b in 0..x.batch {
            let xr = x.plane(b, c);
            let hr = xhat.plane_mut(b, c);
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * istd;
            }
        }
        for b in 0..x.batch {
            let hr = xhat.plane(b, c).to_vec();
            let yr = y.plane_mut(b, c);
            for (out, h) in yr.iter_mut().zip(hr) {
                *out = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat, inv_std, update)
}

/// Returns (dgamma, dbeta, dx) given the cached normalized activations.
fn bn_backward<F: Scalar>(
    gamma: &[F],
    xhat: &Planes<F>,
    inv_std: &[F],
    dy: &Planes<F>,
) -> (Vec<F>, Vec<F>, Planes<F>) {
    let n = fl::<F>((xhat.batch * xhat.len) as f64);
    let mut dgamma = vec![F::zero(); xhat.channels];
    let mut dbeta = vec![F::zero(); xhat.channels];
    let mut dx = Planes::zeros(xhat.batch, xhat.channels, xhat.len);
    for c in 0..xhat.channels {
        let mut s1 = F::zero();
        let mut s2 = F::zero();
        for b in 0..xhat.batch {
            for (&d, &h) in dy.plane(b, c).iter().zip(xhat.plane(b, c)) {
                s1 += d;
                s2 += d * h;
            }
        }
        dgamma[c] = s2;
        dbeta[c] = s1;
        let scale = gamma[c] * inv_std[c];
        let m1 = s1 / n;
        let m2 = s2 / n;
        for b in 0..xhat.batch {
            let dyr = dy.plane(b, c).to_vec();
            let hr = xhat.plane(b, c).to_vec();
            let dxr = dx.plane_mut(b, c);
            for ((out, d), h) in dxr.iter_mut().zip(dyr).zip(hr) {
                *out = scale * (d - m1 - h * m2);
            }
        }
    }
    (dgamma, dbeta, dx)
}

fn relu<F: Scalar>(x: &Planes<F>) -> Planes<F> {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    y
}

fn relu_backward<F: Scalar>(pre: &Planes<F>, dy: &Planes<F>) -> Planes<F> {
    let mut dx = dy.clone();
    for (d, &p) in dx.data.iter_mut().zip(&pre.data) {
        if p <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

/// Non-overlapping max pool; ties go to the earliest position.
fn pool_forward<F: Scalar>(x: &Planes<F>, p: usize) -> (Planes<F>, Vec<usize>) {
    let l_out = x.len / p;
    let mut y = Planes::zeros(x.batch, x.channels, l_out);
    let mut argmax = vec![0usize; x.batch * x.channels * l_out];
    for b in 0..x.batch {
        for c in 0..x.channels {
            let xr = x.plane(b, c);
            let yr = y.plane_mut(b, c);
            let abase = (b * x.channels + c) * l_out;
            for t in 0..l_out {
                let mut best = t * p;
                for s in t * p + 1..t * p + p {
                    if xr[s] > xr[best] {
                        best = s;
                    }
                }
                yr[t] = xr[best];
                argmax[abase + t] = best;
            }
        }
    }
    (y, argmax)
}

fn pool_backward<F: Scalar>(
    src_shape: &Planes<F>,
    argmax: &[usize],
    dy: &Planes<F>,
) -> Planes<F> {
    let mut dx = Planes::zeros(src_shape.batch, src_shape.channels, src_shape.len);
    for b in 0..dy.batch {
        for c in 0..dy.channels {
            let dyr = dy.plane(b, c).to_vec();
            let abase = (b * dy.channels + c) * dy.len;
            let dxr = dx.plane_mut(b, c);
            for (t, d) in dyr.into_iter().enumerate() {
                dxr[argmax[abase + t]] += d;
            }
        }
    }
    dx
}

fn dense_forward<F: Scalar>(w: &[F], bias: &[F], in_dim: usize, x: &Planes<F>) -> Planes<F> {
    let out_dim = bias.len();
    let mut y = Planes::zeros(x.batch, 1, out_dim);
    for b in 0..x.batch {
        let xr = x.flat(b);
        let yr = y.plane_mut(b, 0);
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias[o];
            for (wv, xv) in wr.iter().zip(xr) {
                acc += *wv * *xv;
            }
            yr[o] = acc;
        }
    }
    y
}

fn dense_backward<F: Scalar>(
    w: &[F],
    in_dim: usize,
    x: &Planes<F>,
    dy: &Planes<F>,
) -> (Vec<F>, Vec<F>, Planes<F>) {
    let out_dim = dy.len;
    let mut dw = vec![F::zero(); w.len()];
    let mut db = vec![F::zero(); out_dim];
    let mut dx = Planes::zeros(x.batch, x.channels, x.len);
    for b in 0..x.batch {
        let xr = x.flat(b).to_vec();
        let dyr = dy.plane(b, 0).to_vec();
        for (o, d) in dyr.iter().enumerate() {
            db[o] += *d;
            let wrow = &mut dw[o * in_dim..(o + 1) * in_dim];
            for (dwv, xv) in wrow.iter_mut().zip(&xr) {
                *dwv += *d * *xv;
            }
        }
        let n = x.channels * x.len;
        let base = b * n;
        for (o, d) in dyr.iter().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            for (i, wv) in wr.iter().enumerate() {
                dx.data[base + i] += *d * *wv;
            }
        }
    }
    (dw, db, dx)
}

fn softmax_rows<F: Scalar>(logits: &Planes<F>) -> Planes<F> {
    let mut probs = logits.clone();
    for b in 0..logits.batch {
        let row = probs.plane_mut(b, 0);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Mean cross-entropy over the batch, computed from raw logits for stability.
fn batch_loss<F: Scalar>(logits: &Planes<F>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.plane(b, 0);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = as_f64(max)
            + row.iter().map(|&v| as_f64((v - max).exp())).sum::<f64>().ln();
        total += lse - as_f64(row[label]);
    }
    total / labels.len() as f64
}

type RunningUpdate<F> = Vec<(Vec<F>, Vec<F>)>;

fn forward_batch<F: Scalar>(
    model: &Model<F>,
    x0: Planes<F>,
    mode: Mode,
) -> (Pass<F>, Option<RunningUpdate<F>>) {
    let k = model.cfg.kernel_size;
    let p = model.cfg.pool_size;
    let mut updates = if mode == Mode::Train { Some(Vec::with_capacity(3)) } else { None };

    let mut xhat_all = Vec::with_capacity(3);
    let mut inv_std_all = Vec::with_capacity(3);
    let mut pre_relu_all = Vec::with_capacity(3);
    let mut argmax_all = Vec::with_capacity(3);
    let mut pooled_all: Vec<Planes<F>> = Vec::with_capacity(3);

    for s in 0..3 {
        let (cin, cout) = model.stage_channels(s);
        let x = if s == 0 { &x0 } else { &pooled_all[s - 1] };
        let conv = conv_forward(model.params.conv_w(s), model.params.conv_b(s), cin, cout, k, x);
        let (bn_out, xhat, inv_std, update) = bn_forward(
            model.params.bn_gamma(s),
            model.params.bn_beta(s),
            &model.running_mean[s],
            &model.running_var[s],
            &conv,
            mode,
        );
        if let (Some(list), Some(u)) = (updates.as_mut(), update) {
            list.push(u);
        }
        let activated = relu(&bn_out);
        let (pooled, argmax) = pool_forward(&activated, p);
        xhat_all.push(xhat);
        inv_std_all.push(inv_std);
        pre_relu_all.push(bn_out);
        argmax_all.push(argmax);
        pooled_all.push(pooled);
    }

    let (cin4, cout4) = model.stage_channels(3);
    let c4_pre = conv_forward(
        model.params.conv_w(3),
        model.params.conv_b(3),
        cin4,
        cout4,
        k,
        &pooled_all[2],
    );
    let r4 = relu(&c4_pre);
    let fc1_pre = dense_forward(model.params.fc_w(0), model.params.fc_b(0), model.flat_dim(), &r4);
    let fc1_post = relu(&fc1_pre);
    let logits =
        dense_forward(model.params.fc_w(1), model.params.fc_b(1), model.cfg.fc_hidden, &fc1_post);
    let probs = softmax_rows(&logits);

    (
        Pass {
            x0,
            xhat: xhat_all,
            inv_std: inv_std_all,
            pre_relu: pre_relu_all,
            argmax: argmax_all,
            pooled: pooled_all,
            c4_pre,
            r4,
            fc1_pre,
            fc1_post,
            logits,
            probs,
        },
        updates,
    )
}

/// Backward pass for mean cross-entropy; `pass` must come from train mode.
fn backward<F: Scalar>(model: &Model<F>, pass: &Pass<F>, labels: &[usize]) -> ParamSet<F> {
    let k = model.cfg.kernel_size;
    let batch = pass.x0.batch;
    let mut grads = ParamSet::zeros_like(&model.params);

    // dL/dlogits = (p - onehot)/B.
    let mut dlogits = pass.probs.clone();
    let inv_b = F::one() / fl(batch as f64);
    for (b, &label) in labels.iter().enumerate() {
        let row = dlogits.plane_mut(b, 0);
        row[label] -= F::one();
        for v in row.iter_mut() {
            *v *= inv_b;
        }
    }

    let (dw2, db2, dfc1_post) =
        dense_backward(model.params.fc_w(1), model.cfg.fc_hidden, &pass.fc1_post, &dlogits);
    grads.tensors[T_FC_W + 1] = dw2;
    grads.tensors[T_FC_B + 1] = db2;

    let dfc1_pre = relu_backward(&pass.fc1_pre, &dfc1_post);
    let (dw1, db1, dr4) = dense_backward(model.params.fc_w(0), model.flat_dim(), &pass.r4, &dfc1_pre);
    grads.tensors[T_FC_W] = dw1;
    grads.tensors[T_FC_B] = db1;

    let dc4_pre = relu_backward(&pass.c4_pre, &dr4);
    let (cin4, cout4) = model.stage_channels(3);
    let (dw4, db4, mut dnext) =
        conv_backward(model.params.conv_w(3), cin4, cout4, k, &pass.pooled[2], &dc4_pre);
    grads.tensors[T_CONV_W + 3] = dw4;
    grads.tensors[T_CONV_B + 3] = db4;

    for s in (0..3).rev() {
        let activated_shape = &pass.pre_relu[s];
        let dactivated = pool_backward(activated_shape, &pass.argmax[s], &dnext);
        let dbn_out = relu_backward(&pass.pre_relu[s], &dactivated);
        let (dgamma, dbeta, dconv) =
            bn_backward(model.params.bn_gamma(s), &pass.xhat[s], &pass.inv_std[s], &dbn_out);
        grads.tensors[T_BN_GAMMA + s] = dgamma;
        grads.tensors[T_BN_BETA + s] = dbeta;
        let (cin, cout) = model.stage_channels(s);
        let x = if s == 0 { &pass.x0 } else { &pass.pooled[s - 1] };
        let (dw, db, dx) = conv_backward(model.params.conv_w(s), cin, cout, k, x, &dconv);
        grads.tensors[T_CONV_W + s] = dw;
        grads.tensors[T_CONV_B + s] = db;
        dnext = dx;
    }

    grads
}

fn apply_running_updates<F: Scalar>(model: &mut Model<F>, updates: RunningUpdate<F>) {
    let m = fl::<F>(BN_MOMENTUM);
    for (s, (mean, var)) in updates.into_iter().enumerate() {
        for (r, v) in model.running_mean[s].iter_mut().zip(mean) {
            *r = (F::one() - m) * *r + m * v;
        }
        for (r, v) in model.running_var[s].iter_mut().zip(var) {
            *r = (F::one() - m) * *r + m * v;
        }
    }
}

struct Adam<F> {
    m: ParamSet<F>,
    v: ParamSet<F>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    fn new(params: &ParamSet<F>) -> Self {
        Self { m: ParamSet::zeros_like(params), v: ParamSet::zeros_like(params), t: 0 }
    }

    fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let b1 = fl::<F>(ADAM_BETA1);
        let b2 = fl::<F>(ADAM_BETA2);
        let c1 = fl::<F>(1.0 - ADAM_BETA1.powi(self.t as i32));
        let c2 = fl::<F>(1.0 - ADAM_BETA2.powi(self.t as i32));
        let lr_f = fl::<F>(lr);
        let eps = fl::<F>(ADAM_EPS);
        for i in 0..NUM_TENSORS {
            let decay =
                if is_weight_tensor(i) { fl::<F>(lr * weight_decay) } else { F::zero() };
            let mt = &mut self.m.tensors[i];
            let vt = &mut self.v.tensors[i];
            let gt = &grads.tensors[i];
            let pt = &mut params.tensors[i];
            for j in 0..pt.len() {
                let g = gt[j];
                mt[j] = b1 * mt[j] + (F::one() - b1) * g;
                vt[j] = b2 * vt[j] + (F::one() - b2) * g * g;
                let mhat = mt[j] / c1;
                let vhat = vt[j] / c2;
                let w = pt[j];
                pt[j] = w - lr_f * mhat / (vhat.sqrt() + eps) - decay * w;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters the model ended up with.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn batch_input<F: Scalar>(
    features: &[&RffFeature],
    input_length: usize,
) -> Result<Planes<F>, ClassifierError> {
    let mut x = Planes::zeros(features.len(), 1, input_length);
    for (b, f) in features.iter().enumerate() {
        if f.len() != input_length {
            return Err(ClassifierError::ShapeMismatch { expected: input_length, got: f.len() });
        }
        let row = x.plane_mut(b, 0);
        for (dst, &v) in row.iter_mut().zip(&f.values) {
            *dst = fl(v as f64);
        }
    }
    Ok(x)
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<(), ClassifierError> {
    for &label in labels {
        if label >= num_classes {
            return Err(ClassifierError::BadLabel { label, num_classes });
        }
    }
    Ok(())
}

/// Mean loss and accuracy of the frozen model on a labeled set.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    features: &[RffFeature],
    labels: &[usize],
) -> Result<(f64, f64), ClassifierError> {
    if features.len() != labels.len() {
        return Err(ClassifierError::CountMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    check_labels(labels, model.cfg.num_classes)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (chunk_f, chunk_l) in features.chunks(64).zip(labels.chunks(64)) {
        let refs: Vec<&RffFeature> = chunk_f.iter().collect();
        let x0 = batch_input(&refs, model.cfg.input_length)?;
        let (pass, _) = forward_batch(model, x0, Mode::Eval);
        loss_sum += batch_loss(&pass.logits, chunk_l) * chunk_l.len() as f64;
        for (b, &label) in chunk_l.iter().enumerate() {
            let row = pass.probs.plane(b, 0);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / labels.len() as f64, correct as f64 / labels.len() as f64))
}

/// Softmax scores for each feature, in order.
pub fn predict_scores<F: Scalar>(
    model: &Model<F>,
    features: &[RffFeature],
) -> Result<Vec<SoftmaxScores>, ClassifierError> {
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(64) {
        let refs: Vec<&RffFeature> = chunk.iter().collect();
        let x0 = batch_input(&refs, model.cfg.input_length)?;
        let (pass, _) = forward_batch(model, x0, Mode::Eval);
        for b in 0..chunk.len() {
            out.push(SoftmaxScores {
                scores: pass.probs.plane(b, 0).iter().map(|&p| as_f64(p)).collect(),
            });
        }
    }
    Ok(out)
}

/// Trains in place. With a validation split the model ends at the
/// best-validation-loss epoch; otherwise at the last epoch.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    features: &[RffFeature],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport, ClassifierError> {
    if features.len() != labels.len() {
        return Err(ClassifierError::CountMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    check_labels(labels, model.cfg.num_classes)?;

    // Deterministic holdout: shuffle once, take the tail.
    let n = features.len();
    let mut order: Vec<usize> = (0..n).collect();
    let n_val = if cfg.validation_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, &[0x76616c]));
        order.shuffle(&mut rng);
        ((n as f64 * cfg.validation_fraction) as usize).min(n - 1)
    } else {
        0
    };
    let (train_idx, val_idx) = order.split_at(n - n_val);
    let train_idx = train_idx.to_vec();
    let val_features: Vec<RffFeature> = val_idx.iter().map(|&i| features[i].clone()).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut adam = Adam::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamSet<F>, Vec<Vec<F>>, Vec<Vec<F>>)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr0 * cfg.lr_decay_per_epoch.powi(epoch as i32);
        let mut epoch_idx = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, &[epoch as u64]));
        epoch_idx.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_no, chunk) in epoch_idx.chunks(cfg.batch_size.max(1)).enumerate() {
            let refs: Vec<&RffFeature> = chunk.iter().map(|&i| &features[i]).collect();
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x0 = batch_input(&refs, model.cfg.input_length)?;
            let (pass, updates) = forward_batch(model, x0, Mode::Train);
            let loss = batch_loss(&pass.logits, &chunk_labels);
            if !loss.is_finite() {
                return Err(ClassifierError::NonFiniteLoss { epoch, batch: batch_no, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            for (b, &label) in chunk_labels.iter().enumerate() {
                let row = pass.probs.plane(b, 0);
                let mut bi = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[bi] {
                        bi = i;
                    }
                }
                if bi == label {
                    correct += 1;
                }
            }
            let grads = backward(model, &pass, &chunk_labels);
            if let Some(u) = updates {
                apply_running_updates(model, u);
            }
            adam.step(&mut model.params, &grads, lr, cfg.weight_decay);
        }

        let (val_loss, val_acc) = if val_features.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(model, &val_features, &val_labels)?;
            (Some(l), Some(a))
        };
        history.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            val_loss,
            val_accuracy: val_acc,
        });

        if let Some(vl) = val_loss {
            let improved = best.as_ref().map_or(true, |(b, _, _, _, _)| vl < *b);
            if improved {
                best = Some((
                    vl,
                    epoch,
                    model.params.clone(),
                    model.running_mean.clone(),
                    model.running_var.clone(),
                ));
            } else if let (Some(patience), Some((_, be, _, _, _))) = (cfg.patience, best.as_ref())
            {
                if epoch - *be >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_epoch = if let Some((_, epoch, params, rm, rv)) = best {
        model.params = params;
        model.running_mean = rm;
        model.running_var = rv;
        epoch
    } else {
        history.last().map_or(0, |e| e.epoch)
    };

    Ok(TrainReport { epochs: history, best_epoch, stopped_early })
}

/// Compares analytic gradients against central finite differences for every
/// parameter; returns the worst relative error. Train-mode forward with a
/// single-sample batch, 64-bit arithmetic.
pub fn gradient_check(
    model: &Model<f64>,
    feature: &RffFeature,
    label: usize,
) -> Result<f64, ClassifierError> {
    if model.num_parameters() > 5000 {
        return Err(ClassifierError::BadConfig(
            "gradient check is reserved for models with at most 5000 parameters".into(),
        ));
    }
    if label >= model.cfg.num_classes {
        return Err(ClassifierError::BadLabel { label, num_classes: model.cfg.num_classes });
    }
    let labels = [label];
    let x0 = batch_input(std::slice::from_ref(&feature), model.cfg.input_length)?;
    let (pass, _) = forward_batch(model, x0, Mode::Train);
    let analytic = backward(model, &pass, &labels);

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..NUM_TENSORS {
        for j in 0..model.params.tensors[i].len() {
            let orig = model.params.tensors[i][j];
            let mut loss_at = |v: f64| {
                probe.params.tensors[i][j] = v;
                let x = batch_input(std::slice::from_ref(&feature), probe.cfg.input_length)
                    .expect("shape already checked");
                let (p, _) = forward_batch(&probe, x, Mode::Train);
                batch_loss(&p.logits, &labels)
            };
            let numeric =
                (loss_at(orig + GRAD_CHECK_STEP) - loss_at(orig - GRAD_CHECK_STEP))
                    / (2.0 * GRAD_CHECK_STEP);
            probe.params.tensors[i][j] = orig;
            let a = analytic.tensors[i][j];
            if a.abs().max(numeric.abs()) < GRAD_CHECK_FLOOR {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
