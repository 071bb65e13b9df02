//! Feed-forward inversion surrogate: dense and "same"-padded convolutional
//! layers, ReLU and inverted dropout, with hand-written reverse-mode gradients.
//!
//! Activations are `(channels, height, width)` tensors. The network input is a
//! single-channel image; a dense layer flattens whatever it receives and emits a
//! `(1, 1, out_dim)` strip. The final activation is reshaped into the declared
//! output image shape.
//!
//! Dropout masks: for dropout layer `l` in a pass with seed `s`, unit `u` is read
//! from [`stream_rng`]`(s, l)` in flat order; it is kept iff a uniform draw in
//! `[0, 1)` is `>= rate`, and kept units are scaled by `1 / (1 - rate)`.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::forward_ops::{conv_kernel_grad_acc, conv_same_acc, corr_same_acc};
use crate::grid::{self, ImageGrid};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => (in_dim * out_dim, out_dim),
            LayerSpec::Conv2d {
                kernel_size,
                in_channels,
                out_channels,
            } => (
                out_channels * in_channels * kernel_size * kernel_size,
                out_channels,
            ),
            LayerSpec::Relu | LayerSpec::Dropout { .. } => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            LayerSpec::Conv2d {
                kernel_size,
                in_channels,
                ..
            } => in_channels * kernel_size * kernel_size,
            _ => 0,
        }
    }
}

/// Tensor shape `(channels, height, width)`.
pub type TensorShape = (usize, usize, usize);

/// Knobs of the default encoder-decoder CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub hidden_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    /// 1-based hidden layers followed by dropout.
    pub dropout_after: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden_channels: vec![16, 32, 16],
            kernel_size: 3,
            dropout_rate: 0.1,
            dropout_after: vec![2, 3],
        }
    }
}

/// Layer list plus the image shapes at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: (usize, usize),
    pub output_shape: (usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(
        input_shape: (usize, usize),
        output_shape: (usize, usize),
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let spec = Self {
            input_shape,
            output_shape,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Hidden conv layers with ReLU, optional dropout, then a linear conv head
    /// back to one channel. Output shape equals input shape.
    pub fn encoder_decoder(shape: (usize, usize), arch: &Architecture) -> Result<Self> {
        let k = arch.kernel_size;
        let mut layers = Vec::new();
        let mut channels = 1;
        for (i, &c) in arch.hidden_channels.iter().enumerate() {
            layers.push(LayerSpec::Conv2d {
                kernel_size: k,
                in_channels: channels,
                out_channels: c,
            });
            layers.push(LayerSpec::Relu);
            if arch.dropout_after.contains(&(i + 1)) {
                layers.push(LayerSpec::Dropout {
                    rate: arch.dropout_rate,
                });
            }
            channels = c;
        }
        layers.push(LayerSpec::Conv2d {
            kernel_size: k,
            in_channels: channels,
            out_channels: 1,
        });
        Self::new(shape, shape, layers)
    }

    /// Shape of every activation, starting with the input.
    pub fn activation_shapes(&self) -> Result<Vec<TensorShape>> {
        let (h, w) = self.input_shape;
        if h == 0 || w == 0 {
            return Err(invalid("network input shape must be positive"));
        }
        let mut shapes = vec![(1, h, w)];
        for (i, layer) in self.layers.iter().enumerate() {
            let (c, h, w) = *shapes.last().unwrap();
            let next = match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(invalid(format!("layer {i}: dense dims must be positive")));
                    }
                    if c * h * w != in_dim {
                        return Err(invalid(format!(
                            "layer {i}: dense expects {in_dim} inputs, receives {}",
                            c * h * w
                        )));
                    }
                    (1, 1, out_dim)
                }
                LayerSpec::Conv2d {
                    kernel_size,
                    in_channels,
                    out_channels,
                } => {
                    if kernel_size == 0 || kernel_size % 2 == 0 {
                        return Err(invalid(format!("layer {i}: conv kernel must be odd")));
                    }
                    if in_channels == 0 || out_channels == 0 {
                        return Err(invalid(format!(
                            "layer {i}: conv channels must be positive"
                        )));
                    }
                    if in_channels != c {
                        return Err(invalid(format!(
                            "layer {i}: conv expects {in_channels} channels, receives {c}"
                        )));
                    }
                    (out_channels, h, w)
                }
                LayerSpec::Relu => (c, h, w),
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(invalid(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    (c, h, w)
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    fn validate(&self) -> Result<()> {
        let shapes = self.activation_shapes()?;
        let (c, h, w) = *shapes.last().unwrap();
        let (oh, ow) = self.output_shape;
        if c * h * w != oh * ow {
            return Err(invalid(format!(
                "final activation has {} values, output image {oh}x{ow} needs {}",
                c * h * w,
                oh * ow
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (w, b) = l.param_counts();
                w + b
            })
            .sum()
    }

    pub fn has_active_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dropout { rate } if *rate > 0.0))
    }

    /// Fits an observation to the network input: identical shapes pass through,
    /// integer-smaller ones are nearest-neighbour upsampled.
    pub fn prepare_input(&self, g: &ImageGrid) -> Result<ImageGrid> {
        let (h, w) = self.input_shape;
        if g.shape() == (h, w) {
            return Ok(g.clone());
        }
        if h % g.height() == 0 && w % g.width() == 0 && h / g.height() == w / g.width() {
            return Ok(g.upsample_nearest(h / g.height()));
        }
        Err(invalid(format!(
            "input {}x{} cannot be fitted to network input {h}x{w}",
            g.height(),
            g.width()
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamSlot {
    weight: Range<usize>,
    bias: Range<usize>,
}

/// Flat parameter vector with a per-layer structured view over the same storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    flat: Vec<f64>,
    slots: Vec<ParamSlot>,
}

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        for layer in &spec.layers {
            let (nw, nb) = layer.param_counts();
            slots.push(ParamSlot {
                weight: offset..offset + nw,
                bias: offset + nw..offset + nw + nb,
            });
            offset += nw + nb;
        }
        Self {
            flat: vec![0.0; offset],
            slots,
        }
    }

    pub fn from_flat(spec: &NetworkSpec, flat: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(spec);
        if flat.len() != p.flat.len() {
            return Err(invalid(format!(
                "spec needs {} parameters, got {}",
                p.flat.len(),
                flat.len()
            )));
        }
        p.flat = flat;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            flat: vec![0.0; self.flat.len()],
            slots: self.slots.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn layer_count(&self) -> usize {
        self.slots.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.flat[self.slots[layer].weight.clone()]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.slots[layer].weight.clone();
        &mut self.flat[r]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.flat[self.slots[layer].bias.clone()]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.slots[layer].bias.clone();
        &mut self.flat[r]
    }

    fn weights_and_bias_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let slot = &self.slots[layer];
        let (w, b) = (slot.weight.clone(), slot.bias.clone());
        debug_assert_eq!(w.end, b.start);
        let (head, tail) = self.flat[w.start..b.end].split_at_mut(w.len());
        (head, tail)
    }

    pub fn add_scaled(&mut self, other: &NetworkParams, s: f64) {
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.flat.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    fn matches(&self, spec: &NetworkSpec) -> bool {
        self.slots.len() == spec.layers.len() && self.flat.len() == spec.param_count()
    }
}

/// Initialization of the linear output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    /// All-zero head weights: the untrained network outputs its bias (zero).
    Zero,
    /// Same `N(0, 2 / fan_in)` draw as the hidden layers.
    He,
}

/// [`init_params_with`] using [`HeadInit::Zero`].
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    init_params_with(spec, seed, HeadInit::Zero)
}

/// Weights `N(0, 2 / fan_in)` drawn from `stream_rng(seed, layer)`, biases zero.
///
/// The head is the last dense/conv layer when it follows at least one other
/// weight layer and is not followed by a ReLU; `head` decides its weights.
pub fn init_params_with(spec: &NetworkSpec, seed: u64, head: HeadInit) -> Result<NetworkParams> {
    spec.validate()?;
    let mut params = NetworkParams::zeros(spec);
    let head_index = head_layer(spec);
    for (i, layer) in spec.layers.iter().enumerate() {
        let fan_in = layer.fan_in();
        if fan_in == 0 || (head == HeadInit::Zero && head_index == Some(i)) {
            continue;
        }
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let mut rng = stream_rng(seed, i as u64);
        for w in params.weights_mut(i) {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

fn head_layer(spec: &NetworkSpec) -> Option<usize> {
    let weighted: Vec<usize> = (0..spec.layers.len())
        .filter(|&i| spec.layers[i].fan_in() > 0)
        .collect();
    let &last = weighted.last()?;
    let feeds_relu = spec.layers[last + 1..]
        .iter()
        .any(|l| matches!(l, LayerSpec::Relu));
    (weighted.len() > 1 && !feeds_relu).then_some(last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Dropout masks drawn; used while training.
    Train { seed: u64 },
    /// No masks, no scaling.
    Deterministic,
    /// Masks drawn at inference time (MC dropout).
    Stochastic { seed: u64 },
}

impl EvalMode {
    fn mask_seed(self) -> Option<u64> {
        match self {
            EvalMode::Train { seed } | EvalMode::Stochastic { seed } => Some(seed),
            EvalMode::Deterministic => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Activation {
    shape: TensorShape,
    data: Vec<f64>,
}

/// Per-layer inputs and dropout masks recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    inputs: Vec<Activation>,
    masks: Vec<Option<Vec<f64>>>,
    param_len: usize,
}

impl ForwardTape {
    pub fn layer_count(&self) -> usize {
        self.inputs.len()
    }

    /// Scaled keep-mask of layer `i`, if it is a dropout layer run with masks.
    pub fn mask(&self, i: usize) -> Option<&[f64]> {
        self.masks.get(i).and_then(|m| m.as_deref())
    }
}

/// `f_NN(w; g)` together with the tape for [`backward`].
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    input: &ImageGrid,
    mode: EvalMode,
) -> Result<(ImageGrid, ForwardTape)> {
    if input.shape() != spec.input_shape {
        return Err(invalid(format!(
            "network expects {:?} input, got {:?}",
            spec.input_shape,
            input.shape()
        )));
    }
    if !params.matches(spec) {
        return Err(invalid("parameters do not match network spec"));
    }
    let shapes = spec.activation_shapes()?;
    let mut act = Activation {
        shape: shapes[0],
        data: input.values().to_vec(),
    };
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut masks = Vec::with_capacity(spec.layers.len());

    for (i, layer) in spec.layers.iter().enumerate() {
        let out_shape = shapes[i + 1];
        let mut mask = None;
        let data = match *layer {
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = params.weights(i);
                let b = params.bias(i);
                (0..out_dim)
                    .map(|o| b[o] + grid::dot(&w[o * in_dim..(o + 1) * in_dim], &act.data))
                    .collect()
            }
            LayerSpec::Conv2d {
                kernel_size: k,
                in_channels,
                out_channels,
            } => {
                let (_, h, wd) = act.shape;
                let plane = h * wd;
                let w = params.weights(i);
                let b = params.bias(i);
                let mut out = vec![0.0; out_channels * plane];
                for o in 0..out_channels {
                    let dst = &mut out[o * plane..(o + 1) * plane];
                    dst.iter_mut().for_each(|v| *v = b[o]);
                    for c in 0..in_channels {
                        let kern =
                            &w[(o * in_channels + c) * k * k..(o * in_channels + c + 1) * k * k];
                        conv_same_acc(&act.data[c * plane..(c + 1) * plane], h, wd, kern, k, dst);
                    }
                }
                out
            }
            LayerSpec::Relu => act
                .data
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
            LayerSpec::Dropout { rate } => match mode.mask_seed() {
                None => act.data.clone(),
                Some(seed) => {
                    let mut rng = stream_rng(seed, i as u64);
                    let scale = 1.0 / (1.0 - rate);
                    let m: Vec<f64> = (0..act.data.len())
                        .map(|_| {
                            if rng.random::<f64>() >= rate {
                                scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let out = act.data.iter().zip(&m).map(|(a, s)| a * s).collect();
                    mask = Some(m);
                    out
                }
            },
        };
        if data.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::NumericFailure {
                context: "forward",
                index: i,
            });
        }
        inputs.push(std::mem::replace(
            &mut act,
            Activation {
                shape: out_shape,
                data,
            },
        ));
        masks.push(mask);
    }

    let (oh, ow) = spec.output_shape;
    let output = ImageGrid::from_parts(oh, ow, act.data);
    Ok((
        output,
        ForwardTape {
            inputs,
            masks,
            param_len: params.len(),
        },
    ))
}

/// Reverse-mode gradients of `<grad_output, f_NN>` with respect to the
/// parameters and the input. ReLU has derivative 0 at 0.
pub fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    tape: &ForwardTape,
    grad_output: &ImageGrid,
) -> Result<(NetworkParams, ImageGrid)> {
    if tape.inputs.len() != spec.layers.len()
        || tape.param_len != params.len()
        || !params.matches(spec)
    {
        return Err(invalid("forward tape does not match network"));
    }
    if grad_output.shape() != spec.output_shape {
        return Err(invalid("grad_output shape does not match network output"));
    }
    let shapes = spec.activation_shapes()?;
    for (i, a) in tape.inputs.iter().enumerate() {
        if a.shape != shapes[i] {
            return Err(invalid(format!("tape activation {i} has stale shape")));
        }
    }

    let mut grads = params.zeros_like();
    let mut g = grad_output.values().to_vec();

    for i in (0..spec.layers.len()).rev() {
        let x = &tape.inputs[i];
        g = match spec.layers[i] {
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = params.weights(i);
                let (gw, gb) = grads.weights_and_bias_mut(i);
                let mut gx = vec![0.0; in_dim];
                for o in 0..out_dim {
                    let go = g[o];
                    gb[o] += go;
                    if go == 0.0 {
                        continue;
                    }
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                    for j in 0..in_dim {
                        grow[j] += go * x.data[j];
                        gx[j] += go * row[j];
                    }
                }
                gx
            }
            LayerSpec::Conv2d {
                kernel_size: k,
                in_channels,
                out_channels,
            } => {
                let (_, h, wd) = x.shape;
                let plane = h * wd;
                let w = params.weights(i);
                let (gw, gb) = grads.weights_and_bias_mut(i);
                let mut gx = vec![0.0; in_channels * plane];
                for o in 0..out_channels {
                    let go = &g[o * plane..(o + 1) * plane];
                    gb[o] += go.iter().sum::<f64>();
                    for c in 0..in_channels {
                        let idx = (o * in_channels + c) * k * k;
                        let src = &x.data[c * plane..(c + 1) * plane];
                        conv_kernel_grad_acc(src, go, h, wd, k, &mut gw[idx..idx + k * k]);
                        corr_same_acc(
                            go,
                            h,
                            wd,
                            &w[idx..idx + k * k],
                            k,
                            &mut gx[c * plane..(c + 1) * plane],
                        );
                    }
                }
                gx
            }
            LayerSpec::Relu => g
                .iter()
                .zip(&x.data)
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect(),
            LayerSpec::Dropout { .. } => match &tape.masks[i] {
                Some(m) => g.iter().zip(m).map(|(gi, mi)| gi * mi).collect(),
                None => g,
            },
        };
    }

    let (h, w) = spec.input_shape;
    Ok((grads, ImageGrid::from_parts(h, w, g)))
}
