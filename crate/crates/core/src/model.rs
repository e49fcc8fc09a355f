//! Per-segment behaviour classifier.
//!
//! The reference network is a small LeNet-style CNN trained from scratch:
//!
//! ```text
//! input C×m×m (pixels / 255)
//!   → conv 8@5×5, ReLU → max-pool 2×2
//!   → conv 16@5×5, ReLU → max-pool 2×2
//!   → dense 120, ReLU → dense 2 → softmax
//! ```
//!
//! Arithmetic is f64 throughout. After training the weights are rounded to
//! f32, which is the precision of the model file, so a saved and reloaded
//! model predicts exactly like the one in memory. Output index 1 is the
//! malicious class.
//!
//! Externally produced probabilities (for example from a transfer-learned
//! model) can be brought in through the `trace_id,segment_index,p_malicious`
//! probability file and used by the ensemble exactly like [`predict`] output.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Label, LabeledDataset, Split};
use crate::imager::{GrayImage, ImageSeries};

pub const MODEL_MAGIC: &[u8; 6] = b"HNMDL1";
pub const MODEL_VERSION: u16 = 1;
/// Output index holding the malicious-class probability.
pub const MALICIOUS_INDEX: usize = 1;

const CONV1_FILTERS: usize = 8;
const CONV2_FILTERS: usize = 16;
const KERNEL: usize = 5;
const POOL: usize = 2;
const HIDDEN: usize = 120;
const CLASSES: usize = 2;

/// Smallest side for which both conv/pool stages leave at least one pixel.
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training data is degenerate: {0}")]
    DegenerateDataset(String),
    #[error("shape mismatch: model expects {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("unsupported input: {0}")]
    UnsupportedInput(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("probability file line {line}: {reason}")]
    MalformedProbabilityFile { line: usize, reason: String },
    #[error("probability file line {line}: {value} is outside [0, 1]")]
    OutOfRangeProbability { line: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub side: usize,
    pub channels: usize,
}

impl InputSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.side < MIN_SIDE {
            return Err(ModelError::UnsupportedInput(format!(
                "side {} is below the minimum {MIN_SIDE}",
                self.side
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(ModelError::UnsupportedInput(format!(
                "{} channels; 1 or 3 supported",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Layer list stored in the model file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dims {
    c0: usize,
    s0: usize,
    s1: usize,
    p1: usize,
    s2: usize,
    p2: usize,
    flat: usize,
}

impl Dims {
    fn new(spec: InputSpec) -> Self {
        let s1 = spec.side - KERNEL + 1;
        let p1 = s1 / POOL;
        let s2 = p1 - KERNEL + 1;
        let p2 = s2 / POOL;
        Dims {
            c0: spec.channels,
            s0: spec.side,
            s1,
            p1,
            s2,
            p2,
            flat: CONV2_FILTERS * p2 * p2,
        }
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    total: usize,
}

impl Layout {
    fn new(d: &Dims) -> Self {
        let conv1_w = 0;
        let conv1_b = conv1_w + CONV1_FILTERS * d.c0 * KERNEL * KERNEL;
        let conv2_w = conv1_b + CONV1_FILTERS;
        let conv2_b = conv2_w + CONV2_FILTERS * CONV1_FILTERS * KERNEL * KERNEL;
        let fc1_w = conv2_b + CONV2_FILTERS;
        let fc1_b = fc1_w + HIDDEN * d.flat;
        let fc2_w = fc1_b + HIDDEN;
        let fc2_b = fc2_w + CLASSES * HIDDEN;
        Layout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            total: fc2_b + CLASSES,
        }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Activations {
    r1: Vec<f64>,
    p1: Vec<f64>,
    idx1: Vec<usize>,
    r2: Vec<f64>,
    p2: Vec<f64>,
    idx2: Vec<usize>,
    h3: Vec<f64>,
    logits: [f64; CLASSES],
    probs: [f64; CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: InputSpec,
    dims: Dims,
    layout: Layout,
    params: Vec<f64>,
}

impl Network {
    /// All parameters zero.
    pub fn zeros(spec: InputSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let dims = Dims::new(spec);
        let layout = Layout::new(&dims);
        Ok(Network {
            spec,
            dims,
            layout,
            params: vec![0.0; layout.total],
        })
    }

    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init(spec: InputSpec, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let mut net = Network::zeros(spec)?;
        let l = net.layout;
        let k2 = KERNEL * KERNEL;
        let blocks = [
            (l.conv1_w, l.conv1_b, spec.channels * k2, CONV1_FILTERS * k2),
            (l.conv2_w, l.conv2_b, CONV1_FILTERS * k2, CONV2_FILTERS * k2),
            (l.fc1_w, l.fc1_b, net.dims.flat, HIDDEN),
            (l.fc2_w, l.fc2_b, HIDDEN, CLASSES),
        ];
        for (start, end, fan_in, fan_out) in blocks {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[start..end] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn input_spec(&self) -> InputSpec {
        self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn architecture(&self) -> Vec<LayerKind> {
        let d = &self.dims;
        vec![
            LayerKind::Conv {
                in_channels: d.c0,
                out_channels: CONV1_FILTERS,
                kernel: KERNEL,
            },
            LayerKind::Relu,
            LayerKind::MaxPool { size: POOL },
            LayerKind::Conv {
                in_channels: CONV1_FILTERS,
                out_channels: CONV2_FILTERS,
                kernel: KERNEL,
            },
            LayerKind::Relu,
            LayerKind::MaxPool { size: POOL },
            LayerKind::Dense {
                inputs: d.flat,
                outputs: HIDDEN,
            },
            LayerKind::Relu,
            LayerKind::Dense {
                inputs: HIDDEN,
                outputs: CLASSES,
            },
            LayerKind::Softmax,
        ]
    }

    /// Rounds every parameter to the nearest f32.
    pub fn quantize(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    /// Network input (channel-major, scaled to [0, 1]) for a grayscale image.
    pub fn input_from_image(&self, image: &GrayImage) -> Result<Vec<f64>, ModelError> {
        if image.side() != self.spec.side {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{0}x{0}", self.spec.side),
                actual: format!("{0}x{0}", image.side()),
            });
        }
        let plane = image.as_bytes().iter().map(|&p| f64::from(p) / 255.0);
        Ok(plane
            .cycle()
            .take(image.as_bytes().len() * self.spec.channels)
            .collect())
    }

    fn forward_cached(&self, x: &[f64]) -> Activations {
        let d = &self.dims;
        let l = &self.layout;
        let p = &self.params;

        let mut r1 = conv_forward(
            x,
            d.c0,
            d.s0,
            &p[l.conv1_w..l.conv1_b],
            &p[l.conv1_b..l.conv2_w],
            CONV1_FILTERS,
        );
        relu(&mut r1);
        let (p1, idx1) = max_pool(&r1, CONV1_FILTERS, d.s1, d.p1);

        let mut r2 = conv_forward(
            &p1,
            CONV1_FILTERS,
            d.p1,
            &p[l.conv2_w..l.conv2_b],
            &p[l.conv2_b..l.fc1_w],
            CONV2_FILTERS,
        );
        relu(&mut r2);
        let (p2, idx2) = max_pool(&r2, CONV2_FILTERS, d.s2, d.p2);

        let mut h3 = dense_forward(&p2, &p[l.fc1_w..l.fc1_b], &p[l.fc1_b..l.fc2_w], HIDDEN);
        relu(&mut h3);
        let z = dense_forward(&h3, &p[l.fc2_w..l.fc2_b], &p[l.fc2_b..l.total], CLASSES);
        let logits = [z[0], z[1]];
        Activations {
            r1,
            p1,
            idx1,
            r2,
            p2,
            idx2,
            h3,
            logits,
            probs: softmax(logits),
        }
    }

    /// Class probabilities `[benign, malicious]` for one prepared input.
    pub fn forward_input(&self, x: &[f64]) -> [f64; 2] {
        self.forward_cached(x).probs
    }

    /// Accumulates `scale · ∂loss/∂θ` into `grad` for one sample.
    fn backward(&self, x: &[f64], act: &Activations, label: usize, scale: f64, grad: &mut [f64]) {
        let d = &self.dims;
        let l = &self.layout;
        let p = &self.params;

        let mut dz = act.probs;
        dz[label] -= 1.0;
        for v in &mut dz {
            *v *= scale;
        }

        let (gw, rest) = grad[l.fc2_w..l.total].split_at_mut(CLASSES * HIDDEN);
        let dh3 = dense_backward(&act.h3, &p[l.fc2_w..l.fc2_b], &dz, gw, rest);
        let dz3: Vec<f64> = dh3
            .iter()
            .zip(&act.h3)
            .map(|(g, &h)| if h > 0.0 { *g } else { 0.0 })
            .collect();

        let (gw, gb) = grad[l.fc1_w..l.fc2_w].split_at_mut(HIDDEN * d.flat);
        let dp2 = dense_backward(&act.p2, &p[l.fc1_w..l.fc1_b], &dz3, gw, gb);

        let mut dr2 = vec![0.0; act.r2.len()];
        for (g, &i) in dp2.iter().zip(&act.idx2) {
            dr2[i] += g;
        }
        for (g, &r) in dr2.iter_mut().zip(&act.r2) {
            if r <= 0.0 {
                *g = 0.0;
            }
        }

        let mut dp1 = vec![0.0; act.p1.len()];
        let (gw, gb) = grad[l.conv2_w..l.fc1_w].split_at_mut(l.conv2_b - l.conv2_w);
        conv_backward(
            &act.p1,
            CONV1_FILTERS,
            d.p1,
            &p[l.conv2_w..l.conv2_b],
            CONV2_FILTERS,
            &dr2,
            gw,
            gb,
            Some(&mut dp1),
        );

        let mut dr1 = vec![0.0; act.r1.len()];
        for (g, &i) in dp1.iter().zip(&act.idx1) {
            dr1[i] += g;
        }
        for (g, &r) in dr1.iter_mut().zip(&act.r1) {
            if r <= 0.0 {
                *g = 0.0;
            }
        }

        let (gw, gb) = grad[l.conv1_w..l.conv2_w].split_at_mut(l.conv1_b - l.conv1_w);
        conv_backward(
            x,
            d.c0,
            d.s0,
            &p[l.conv1_w..l.conv1_b],
            CONV1_FILTERS,
            &dr1,
            gw,
            gb,
            None,
        );
    }

    /// Mean cross-entropy over `batch` of (input, class) pairs.
    pub fn loss(&self, batch: &[(Vec<f64>, usize)]) -> f64 {
        batch
            .iter()
            .map(|(x, y)| cross_entropy(&self.forward_cached(x).logits, *y))
            .sum::<f64>()
            / batch.len() as f64
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to every
    /// parameter, in parameter order.
    pub fn loss_and_gradient(&self, batch: &[(Vec<f64>, usize)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (x, y) in batch {
            let act = self.forward_cached(x);
            loss += cross_entropy(&act.logits, *y);
            self.backward(x, &act, *y, scale, &mut grad);
        }
        (loss * scale, grad)
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn softmax(z: [f64; CLASSES]) -> [f64; CLASSES] {
    let max = z[0].max(z[1]);
    let e = [(z[0] - max).exp(), (z[1] - max).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

fn cross_entropy(z: &[f64; CLASSES], label: usize) -> f64 {
    let max = z[0].max(z[1]);
    let lse = max + ((z[0] - max).exp() + (z[1] - max).exp()).ln();
    lse - z[label]
}

/// Valid (no padding) stride-1 convolution, channel-major layout.
fn conv_forward(
    input: &[f64],
    c_in: usize,
    s_in: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let s_out = s_in - KERNEL + 1;
    let mut out = vec![0.0; c_out * s_out * s_out];
    for o in 0..c_out {
        let plane = &mut out[o * s_out * s_out..(o + 1) * s_out * s_out];
        plane.fill(b[o]);
        for i in 0..c_in {
            let src = &input[i * s_in * s_in..(i + 1) * s_in * s_in];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wv = w[((o * c_in + i) * KERNEL + ky) * KERNEL + kx];
                    for y in 0..s_out {
                        let row = &src[(y + ky) * s_in + kx..(y + ky) * s_in + kx + s_out];
                        let dst = &mut plane[y * s_out..(y + 1) * s_out];
                        for (d, &s) in dst.iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    c_in: usize,
    s_in: usize,
    w: &[f64],
    c_out: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    let s_out = s_in - KERNEL + 1;
    for o in 0..c_out {
        let g = &dout[o * s_out * s_out..(o + 1) * s_out * s_out];
        db[o] += g.iter().sum::<f64>();
        for i in 0..c_in {
            let src = &input[i * s_in * s_in..(i + 1) * s_in * s_in];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wi = ((o * c_in + i) * KERNEL + ky) * KERNEL + kx;
                    let mut acc = 0.0;
                    for y in 0..s_out {
                        let row = &src[(y + ky) * s_in + kx..(y + ky) * s_in + kx + s_out];
                        let grow = &g[y * s_out..(y + 1) * s_out];
                        acc += grow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[wi] += acc;
                    if let Some(din) = din.as_deref_mut() {
                        let wv = w[wi];
                        let plane = &mut din[i * s_in * s_in..(i + 1) * s_in * s_in];
                        for y in 0..s_out {
                            let start = (y + ky) * s_in + kx;
                            let grow = &g[y * s_out..(y + 1) * s_out];
                            for (d, &gv) in plane[start..start + s_out].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 max pooling (floor on odd sides). Returns the pooled map and, for each
/// output, the flat input index of its maximum.
fn max_pool(input: &[f64], channels: usize, s_in: usize, s_out: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(channels * s_out * s_out);
    let mut idx = Vec::with_capacity(channels * s_out * s_out);
    for c in 0..channels {
        let base = c * s_in * s_in;
        for y in 0..s_out {
            for x in 0..s_out {
                let mut best = base + (y * POOL) * s_in + x * POOL;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let i = base + (y * POOL + dy) * s_in + x * POOL + dx;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

fn dense_forward(input: &[f64], w: &[f64], b: &[f64], outputs: usize) -> Vec<f64> {
    let n = input.len();
    (0..outputs)
        .map(|o| {
            b[o] + w[o * n..(o + 1) * n]
                .iter()
                .zip(input)
                .map(|(a, x)| a * x)
                .sum::<f64>()
        })
        .collect()
}

/// Accumulates weight and bias gradients and returns the input gradient.
fn dense_backward(
    input: &[f64],
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let n = input.len();
    let mut din = vec![0.0; n];
    for (o, &g) in dout.iter().enumerate() {
        db[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n..(o + 1) * n];
        for ((dwi, &x), (di, &wi)) in dw[o * n..(o + 1) * n]
            .iter_mut()
            .zip(input)
            .zip(din.iter_mut().zip(row))
        {
            *dwi += g * x;
            *di += g * wi;
        }
    }
    din
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 100,
            epochs: 10,
            seed: 0,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorModel {
    pub network: Network,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentProbability {
    pub trace_id: String,
    pub segment_index: usize,
    pub p_malicious: f64,
}

/// Plain minibatch SGD on mean cross-entropy. The training split is
/// reshuffled every epoch from an RNG seeded with `config.seed`.
pub fn train(
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(BehaviorModel, TrainReport), ModelError> {
    if config.batch_size == 0 || !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(ModelError::UnsupportedInput(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let train: Vec<_> = dataset.split(Split::Train).collect();
    let benign = train.iter().filter(|s| s.label == Label::Benign).count();
    if benign == 0 || benign == train.len() {
        return Err(ModelError::DegenerateDataset(format!(
            "training split has {benign} benign and {} malicious samples",
            train.len() - benign
        )));
    }
    let side = train[0].image.side();
    let spec = InputSpec {
        side,
        channels: config.channels,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = Network::init(spec, &mut rng)?;

    let inputs: Vec<(Vec<f64>, usize)> = train
        .iter()
        .map(|s| Ok((network.input_from_image(&s.image)?, s.label.index())))
        .collect::<Result<_, ModelError>>()?;

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grad = vec![0.0; network.params.len()];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = &inputs[i];
                let act = network.forward_cached(x);
                total += cross_entropy(&act.logits, *y);
                network.backward(x, &act, *y, scale, &mut grad);
            }
            for (p, g) in network.params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
        epoch_losses.push(total / inputs.len() as f64);
    }
    network.quantize();

    let model = BehaviorModel {
        network,
        meta: TrainingMeta {
            epochs: config.epochs as u32,
            seed: config.seed,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size as u32,
        },
    };
    let val: Vec<_> = dataset.split(Split::Val).collect();
    let val_accuracy = if val.is_empty() {
        None
    } else {
        let correct = val
            .iter()
            .map(|s| {
                Ok((forward(&model, &s.image)?[MALICIOUS_INDEX] > 0.5) == s.label.is_malicious())
            })
            .collect::<Result<Vec<bool>, ModelError>>()?
            .into_iter()
            .filter(|&ok| ok)
            .count();
        Some(correct as f64 / val.len() as f64)
    };
    let report = TrainReport {
        epoch_losses,
        train_samples: inputs.len(),
        val_samples: val.len(),
        val_accuracy,
    };
    Ok((model, report))
}

/// `[p_benign, p_malicious]` for one image.
pub fn forward(model: &BehaviorModel, image: &GrayImage) -> Result<[f64; 2], ModelError> {
    let x = model.network.input_from_image(image)?;
    Ok(model.network.forward_input(&x))
}

/// One malicious probability per segment, in segment order.
pub fn predict(
    model: &BehaviorModel,
    series: &ImageSeries,
) -> Result<Vec<SegmentProbability>, ModelError> {
    let expected = model.network.spec.side;
    if series.side != expected {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{expected}x{expected}"),
            actual: format!("{0}x{0}", series.side),
        });
    }
    series
        .images
        .par_iter()
        .enumerate()
        .map(|(segment_index, image)| {
            Ok(SegmentProbability {
                trace_id: series.trace_id.clone(),
                segment_index,
                p_malicious: forward(model, image)?[MALICIOUS_INDEX],
            })
        })
        .collect()
}

impl BehaviorModel {
    pub fn input_spec(&self) -> InputSpec {
        self.network.spec
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let net = &self.network;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(net.spec.side as u32).to_le_bytes())?;
        w.write_all(&[
            net.spec.channels as u8,
            CLASSES as u8,
            MALICIOUS_INDEX as u8,
        ])?;
        let layers = net.architecture();
        w.write_all(&(layers.len() as u16).to_le_bytes())?;
        for layer in &layers {
            let (tag, fields): (u8, Vec<usize>) = match *layer {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => (1, vec![in_channels, out_channels, kernel]),
                LayerKind::Relu => (2, vec![]),
                LayerKind::MaxPool { size } => (3, vec![size]),
                LayerKind::Dense { inputs, outputs } => (4, vec![inputs, outputs]),
                LayerKind::Softmax => (5, vec![]),
            };
            w.write_all(&[tag])?;
            for f in fields {
                w.write_all(&(f as u32).to_le_bytes())?;
            }
        }
        w.write_all(&(net.params.len() as u32).to_le_bytes())?;
        for &p in &net.params {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        let m = &self.meta;
        w.write_all(&m.epochs.to_le_bytes())?;
        w.write_all(&m.seed.to_le_bytes())?;
        w.write_all(&m.learning_rate.to_le_bytes())?;
        w.write_all(&m.batch_size.to_le_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let fmt = |s: &str| ModelError::Format(s.to_string());
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != MODEL_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let side = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let [channels, classes, malicious] = read_array::<3>(&mut r)?;
        if classes as usize != CLASSES || malicious as usize != MALICIOUS_INDEX {
            return Err(fmt("unexpected class layout"));
        }
        let spec = InputSpec {
            side,
            channels: channels as usize,
        };
        let mut network = Network::zeros(spec)?;

        let count = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let [tag] = read_array::<1>(&mut r)?;
            let mut field = || -> Result<usize, ModelError> {
                Ok(u32::from_le_bytes(read_array(&mut r)?) as usize)
            };
            layers.push(match tag {
                1 => LayerKind::Conv {
                    in_channels: field()?,
                    out_channels: field()?,
                    kernel: field()?,
                },
                2 => LayerKind::Relu,
                3 => LayerKind::MaxPool { size: field()? },
                4 => LayerKind::Dense {
                    inputs: field()?,
                    outputs: field()?,
                },
                5 => LayerKind::Softmax,
                other => return Err(ModelError::Format(format!("unknown layer tag {other}"))),
            });
        }
        if layers != network.architecture() {
            return Err(fmt("architecture does not match the reference network"));
        }
        let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if n != network.params.len() {
            return Err(fmt("parameter count mismatch"));
        }
        for p in &mut network.params {
            *p = f64::from(f32::from_le_bytes(read_array(&mut r)?));
        }
        let meta = TrainingMeta {
            epochs: u32::from_le_bytes(read_array(&mut r)?),
            seed: u64::from_le_bytes(read_array(&mut r)?),
            learning_rate: f64::from_le_bytes(read_array(&mut r)?),
            batch_size: u32::from_le_bytes(read_array(&mut r)?),
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(fmt("trailing bytes"));
        }
        Ok(BehaviorModel { network, meta })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        BehaviorModel::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ModelError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Renders `trace_id,segment_index,p_malicious` lines. Values use the
/// shortest representation that parses back to the same f64.
pub fn probabilities_to_text(probs: &[SegmentProbability]) -> String {
    let mut out = String::new();
    for p in probs {
        let _ = writeln!(out, "{},{},{}", p.trace_id, p.segment_index, p.p_malicious);
    }
    out
}

pub fn parse_probabilities(text: &str) -> Result<Vec<SegmentProbability>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| ModelError::MalformedProbabilityFile {
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(malformed(format!("expected 3 fields, got {}", f.len())));
        }
        let segment_index = f[1]
            .parse()
            .map_err(|e| malformed(format!("segment index: {e}")))?;
        let p: f64 = f[2]
            .parse()
            .map_err(|e| malformed(format!("probability: {e}")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::OutOfRangeProbability {
                line: i + 1,
                value: p,
            });
        }
        out.push(SegmentProbability {
            trace_id: f[0].to_string(),
            segment_index,
            p_malicious: p,
        });
    }
    Ok(out)
}

pub fn import_probabilities(path: &Path) -> Result<Vec<SegmentProbability>, ModelError> {
    parse_probabilities(&fs::read_to_string(path)?)
}

pub fn export_probabilities(path: &Path, probs: &[SegmentProbability]) -> Result<(), ModelError> {
    fs::write(path, probabilities_to_text(probs))?;
    Ok(())
}
