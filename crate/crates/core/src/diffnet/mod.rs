//! Built-in differentiable classifier.
//!
//! A small sequential network (convolution, ReLU, max pooling, flatten,
//! dense) evaluated in `f64`. Inputs are raw intensities in `[0, 255]`; the
//! network normalizes them to `(v - 127.5) / 127.5` before the first layer
//! and folds that scale into every input gradient.
//!
//! Synthesis code only sees the [`Classifier`] trait.

mod gradcheck;
mod io;
pub(crate) mod layers;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use gradcheck::{gradient_check, GradCheckReport, REL_ERROR_FLOOR};
pub use io::{load_weights, load_weights_for, save_weights};
pub use layers::{Dims, Padding};
pub use train::{evaluate, train_classifier, TrainParams, TrainReport};

use crate::error::{Error, Result};
use crate::image_core::{Field, ImageTensor, Shape};
use layers::ConvGeom;

const INPUT_CENTER: f64 = 127.5;
const INPUT_SCALE: f64 = 127.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn conv3x3_same(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv { kernel_h: 3, kernel_w: 3, in_channels, out_channels, stride: 1, padding: Padding::Same }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug)]
enum Resolved {
    Conv(ConvGeom),
    Relu,
    MaxPool { input: Dims, size: usize },
    Flatten,
    Dense { inputs: usize, outputs: usize },
}

impl Architecture {
    /// conv3×3×16 → relu → maxpool2 → conv3×3×32 → relu → maxpool2 →
    /// flatten → dense → `num_classes`.
    pub fn default_for(input: Shape, num_classes: usize) -> Self {
        let flat = 32 * (input.height / 4) * (input.width / 4);
        Architecture {
            input,
            layers: vec![
                LayerSpec::conv3x3_same(input.channels, 16),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv3x3_same(16, 32),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: flat, outputs: num_classes },
            ],
        }
    }

    pub fn mnist() -> Self {
        Self::default_for(Shape::new(28, 28, 1), 10)
    }

    fn resolve(&self) -> Result<Vec<Resolved>> {
        let bad = |i: usize, msg: String| Error::InvalidArgument(format!("layer {i}: {msg}"));
        if self.input.is_empty() {
            return Err(Error::InvalidArgument("empty input shape".into()));
        }
        let mut dims = Dims::new(self.input.channels, self.input.height, self.input.width);
        let mut flat = false;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let r = match *layer {
                LayerSpec::Conv { kernel_h, kernel_w, in_channels, out_channels, stride, padding } => {
                    if flat || in_channels != dims.c || out_channels == 0 {
                        return Err(bad(i, format!("conv expects {} input channels on a spatial map", dims.c)));
                    }
                    let g = ConvGeom::new(dims, out_channels, kernel_h, kernel_w, stride, padding)
                        .ok_or_else(|| bad(i, "degenerate convolution geometry".into()))?;
                    dims = g.output;
                    Resolved::Conv(g)
                }
                LayerSpec::Relu => Resolved::Relu,
                LayerSpec::MaxPool { size } => {
                    if flat {
                        return Err(bad(i, "pooling after flatten".into()));
                    }
                    let input = dims;
                    dims = layers::pool_output(dims, size).ok_or_else(|| bad(i, "degenerate pool".into()))?;
                    Resolved::MaxPool { input, size }
                }
                LayerSpec::Flatten => {
                    flat = true;
                    dims = Dims::new(dims.len(), 1, 1);
                    Resolved::Flatten
                }
                LayerSpec::Dense { inputs, outputs } => {
                    if !flat || inputs != dims.len() || outputs == 0 {
                        return Err(bad(i, format!("dense expects {} flattened inputs", dims.len())));
                    }
                    dims = Dims::new(outputs, 1, 1);
                    Resolved::Dense { inputs, outputs }
                }
            };
            out.push(r);
        }
        if !flat || !matches!(out.last(), Some(Resolved::Dense { .. })) {
            return Err(Error::InvalidArgument("network must end with a dense layer".into()));
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> Result<usize> {
        match self.resolve()?.last() {
            Some(Resolved::Dense { outputs, .. }) => Ok(*outputs),
            _ => unreachable!("resolve guarantees a final dense layer"),
        }
    }

    /// Hex digest of the canonical JSON description.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("architecture serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameters of one layer; empty for parameterless layers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

impl LogitVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest logit; first wins on ties.
    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

/// The contract the synthesis loops depend on.
///
/// Implementations take raw intensities (`Field`, not clamped) so finite
/// differences can probe outside `[0, 255]`.
pub trait Classifier: Sync {
    fn input_shape(&self) -> Shape;
    fn num_classes(&self) -> usize;
    fn fingerprint(&self) -> String;
    fn logits_field(&self, input: &Field) -> Result<LogitVector>;
    /// Logits and `∂L_class / ∂input`, with the input's shape.
    fn gradient_field(&self, input: &Field, class: usize) -> Result<(LogitVector, Field)>;

    /// Discrete state of every piecewise-linear switch (ReLU on/off, pooling
    /// argmax). Backends without one return `None`.
    fn activation_pattern(&self, _input: &Field) -> Option<Vec<u32>> {
        None
    }

    fn forward_logits(&self, img: &ImageTensor) -> Result<LogitVector> {
        self.logits_field(&img.to_field())
    }

    fn input_gradient(&self, img: &ImageTensor, class: usize) -> Result<(LogitVector, Field)> {
        self.gradient_field(&img.to_field(), class)
    }
}

#[derive(Clone, Debug)]
pub struct NetworkWeights {
    arch: Architecture,
    resolved: Vec<Resolved>,
    params: Vec<LayerParams>,
    num_classes: usize,
}

impl PartialEq for NetworkWeights {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Per-layer activations kept for the backward pass.
struct ForwardTrace {
    /// `acts[0]` is the normalized input; `acts[l + 1]` is layer `l`'s output.
    acts: Vec<Vec<f64>>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl NetworkWeights {
    /// He-normal weights and zero biases from a seeded stream.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(arch, |fan_in, n| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::init_with(arch, |_, n| vec![0.0; n])
    }

    fn init_with(arch: Architecture, mut fill: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        let resolved = arch.resolve()?;
        let params = resolved
            .iter()
            .map(|r| match *r {
                Resolved::Conv(g) => LayerParams {
                    weights: fill(g.input.c * g.kh * g.kw, g.weight_len()),
                    bias: vec![0.0; g.output.c],
                },
                Resolved::Dense { inputs, outputs } => {
                    LayerParams { weights: fill(inputs, inputs * outputs), bias: vec![0.0; outputs] }
                }
                _ => LayerParams::default(),
            })
            .collect();
        let num_classes = arch.num_classes()?;
        Ok(NetworkWeights { arch, resolved, params, num_classes })
    }

    pub fn from_params(arch: Architecture, params: Vec<LayerParams>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(Error::shape(format!("{} layers", net.params.len()), format!("{} layers", params.len())));
        }
        for (i, (have, want)) in params.iter().zip(&net.params).enumerate() {
            if have.weights.len() != want.weights.len() || have.bias.len() != want.bias.len() {
                return Err(Error::shape(
                    format!("layer {i}: {}+{} parameters", want.weights.len(), want.bias.len()),
                    format!("{}+{}", have.weights.len(), have.bias.len()),
                ));
            }
            if have.weights.iter().chain(&have.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn params_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            for v in p.weights.iter().chain(&p.bias) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    fn check_input(&self, input: &Field) -> Result<()> {
        input.check_shape(self.arch.input)?;
        if !input.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// HWC intensities to normalized CHW.
    fn normalize(&self, input: &Field) -> Vec<f64> {
        let s = self.arch.input;
        let mut out = vec![0.0; s.len()];
        for (i, &v) in input.data().iter().enumerate() {
            let c = i % s.channels;
            let p = i / s.channels;
            out[c * s.pixels() + p] = (v - INPUT_CENTER) / INPUT_SCALE;
        }
        out
    }

    fn forward_trace(&self, normalized: Vec<f64>) -> ForwardTrace {
        let mut acts = Vec::with_capacity(self.resolved.len() + 1);
        let mut argmax = Vec::with_capacity(self.resolved.len());
        acts.push(normalized);
        for (layer, p) in self.resolved.iter().zip(&self.params) {
            let x = acts.last().expect("input present");
            let (y, arg) = match *layer {
                Resolved::Conv(g) => (g.forward(x, &p.weights, &p.bias), None),
                Resolved::Relu => (layers::relu_forward(x), None),
                Resolved::MaxPool { input, size } => {
                    let (v, a) = layers::maxpool_forward(x, input, size);
                    (v, Some(a))
                }
                Resolved::Flatten => (x.clone(), None),
                Resolved::Dense { .. } => (layers::dense_forward(x, &p.weights, &p.bias), None),
            };
            acts.push(y);
            argmax.push(arg);
        }
        ForwardTrace { acts, argmax }
    }

    /// Back-propagates `dlogits`. Accumulates into `grads` when given and
    /// returns the gradient with respect to the normalized input when
    /// `want_input` is set.
    fn backward(
        &self,
        trace: &ForwardTrace,
        dlogits: Vec<f64>,
        mut grads: Option<&mut [LayerParams]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut d = dlogits;
        for l in (0..self.resolved.len()).rev() {
            let x = &trace.acts[l];
            let p = &self.params[l];
            let need_dx = want_input || l > 0;
            let pg = grads.as_deref_mut().map(|g| {
                let LayerParams { weights, bias } = &mut g[l];
                (weights.as_mut_slice(), bias.as_mut_slice())
            });
            let dx = match self.resolved[l] {
                Resolved::Conv(g) => g.backward(x, &p.weights, &d, pg, need_dx),
                Resolved::Relu => Some(layers::relu_backward(x, &d)),
                Resolved::MaxPool { .. } => {
                    let arg = trace.argmax[l].as_ref().expect("pool argmax recorded");
                    Some(layers::maxpool_backward(x.len(), arg, &d))
                }
                Resolved::Flatten => Some(d),
                Resolved::Dense { .. } => layers::dense_backward(x, &p.weights, &d, pg, need_dx),
            };
            d = dx?;
        }
        Some(d)
    }

    fn logits_from(&self, trace: &ForwardTrace) -> Result<LogitVector> {
        let logits = trace.acts.last().expect("output present").clone();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits (exploding weights?)".into()));
        }
        Ok(LogitVector(logits))
    }

    /// Cross-entropy loss for one sample; accumulates parameter gradients.
    pub(crate) fn accumulate_sample(&self, img: &ImageTensor, label: usize, grads: &mut [LayerParams]) -> f64 {
        let trace = self.forward_trace(self.normalize(&img.to_field()));
        let logits = trace.acts.last().expect("output present");
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - logits[label];
        let mut dlogits: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        dlogits[label] -= 1.0;
        self.backward(&trace, dlogits, Some(grads), false);
        loss
    }

    pub(crate) fn predict(&self, img: &ImageTensor) -> usize {
        let trace = self.forward_trace(self.normalize(&img.to_field()));
        LogitVector(trace.acts.last().expect("output present").clone()).argmax()
    }
}

impl Classifier for NetworkWeights {
    fn input_shape(&self) -> Shape {
        self.arch.input
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Architecture fingerprint joined with a digest of the parameters.
    fn fingerprint(&self) -> String {
        format!("{}-{}", self.arch.fingerprint(), self.params_digest())
    }

    fn logits_field(&self, input: &Field) -> Result<LogitVector> {
        self.check_input(input)?;
        self.logits_from(&self.forward_trace(self.normalize(input)))
    }

    fn gradient_field(&self, input: &Field, class: usize) -> Result<(LogitVector, Field)> {
        if class >= self.num_classes {
            return Err(Error::InvalidArgument(format!("class {class} outside [0, {})", self.num_classes)));
        }
        self.check_input(input)?;
        let trace = self.forward_trace(self.normalize(input));
        let logits = self.logits_from(&trace)?;
        let mut onehot = vec![0.0; self.num_classes];
        onehot[class] = 1.0;
        let dnorm = self.backward(&trace, onehot, None, true).expect("input gradient requested");
        let s = self.arch.input;
        let mut grad = Field::zeros(s);
        for (i, g) in grad.data_mut().iter_mut().enumerate() {
            let c = i % s.channels;
            let p = i / s.channels;
            *g = dnorm[c * s.pixels() + p] / INPUT_SCALE;
        }
        Ok((logits, grad))
    }

    fn activation_pattern(&self, input: &Field) -> Option<Vec<u32>> {
        let trace = self.forward_trace(self.normalize(input));
        let mut pattern = Vec::new();
        for (l, layer) in self.resolved.iter().enumerate() {
            match layer {
                Resolved::Relu => pattern.extend(trace.acts[l].iter().map(|&v| u32::from(v > 0.0))),
                Resolved::MaxPool { .. } => pattern.extend(trace.argmax[l].as_ref().expect("recorded")),
                _ => {}
            }
        }
        Some(pattern)
    }
}
