//! Small trainable feature extractors: a 3-D convolution stack for
//! spatiotemporal inputs and an Elman recurrent cell for sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMap;
use crate::scalar::{cast_vec, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub out_channels: usize,
    /// (time, height, width)
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackboneConfig {
    Spatiotemporal {
        in_channels: usize,
        layers: Vec<ConvLayerConfig>,
    },
    Sequential {
        input_dim: usize,
    },
}

impl BackboneConfig {
    /// Two-layer conv stack for `T x 32 x 32 x 3` clips producing `out_channels` features.
    pub fn default_spatiotemporal(out_channels: usize) -> Self {
        BackboneConfig::Spatiotemporal {
            in_channels: 3,
            layers: vec![
                ConvLayerConfig {
                    out_channels: 8,
                    kernel: [1, 4, 4],
                    stride: [1, 4, 4],
                },
                ConvLayerConfig {
                    out_channels,
                    kernel: [3, 3, 3],
                    stride: [1, 1, 1],
                },
            ],
        }
    }

    pub fn output_channels(&self, hidden: usize) -> usize {
        match self {
            BackboneConfig::Spatiotemporal { in_channels, layers } => {
                layers.last().map_or(*in_channels, |l| l.out_channels)
            }
            BackboneConfig::Sequential { .. } => hidden,
        }
    }
}

/// One 3-D convolution with "valid" padding over channel-last input
/// `T x H x W x C_in`. Weights are laid out `[out][kt][kh][kw][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn zeros(in_channels: usize, cfg: &ConvLayerConfig) -> Self {
        let k = cfg.kernel.iter().product::<usize>() * in_channels;
        Self {
            in_channels,
            out_channels: cfg.out_channels,
            kernel: cfg.kernel,
            stride: cfg.stride,
            weight: vec![T::zero(); k * cfg.out_channels],
            bias: vec![T::zero(); cfg.out_channels],
        }
    }

    pub fn random<R: Rng>(in_channels: usize, cfg: &ConvLayerConfig, rng: &mut R) -> Self {
        let mut conv = Self::zeros(in_channels, cfg);
        let bound = (6.0 / conv.patch_len() as f64).sqrt();
        for w in conv.weight.iter_mut() {
            *w = T::of(rng.gen_range(-bound..bound));
        }
        for b in conv.bias.iter_mut() {
            *b = T::of(0.05);
        }
        conv
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    fn output_dims(&self, input: &[usize]) -> Result<[usize; 3]> {
        let names = ["time", "height", "width"];
        let mut out = [0; 3];
        for axis in 0..3 {
            if input[axis] < self.kernel[axis] {
                return Err(Error::Shape(format!(
                    "{} extent {} is smaller than kernel {}",
                    names[axis], input[axis], self.kernel[axis]
                )));
            }
            out[axis] = (input[axis] - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    fn gather_patch(&self, x: &Tensor<T>, pos: [usize; 3], patch: &mut [T]) {
        let s = x.shape();
        let (h, w, c) = (s[1], s[2], s[3]);
        let [kt, kh, kw] = self.kernel;
        let mut k = 0;
        for dt in 0..kt {
            let t = pos[0] * self.stride[0] + dt;
            for dh in 0..kh {
                let y = pos[1] * self.stride[1] + dh;
                let row = ((t * h + y) * w + pos[2] * self.stride[2]) * c;
                let len = kw * c;
                patch[k..k + len].copy_from_slice(&x.data()[row..row + len]);
                k += len;
            }
        }
    }

    fn scatter_patch(&self, dx: &mut Tensor<T>, pos: [usize; 3], patch: &[T]) {
        let s = dx.shape().to_vec();
        let (h, w, c) = (s[1], s[2], s[3]);
        let [kt, kh, kw] = self.kernel;
        let data = dx.data_mut();
        let mut k = 0;
        for dt in 0..kt {
            let t = pos[0] * self.stride[0] + dt;
            for dh in 0..kh {
                let y = pos[1] * self.stride[1] + dh;
                let row = ((t * h + y) * w + pos[2] * self.stride[2]) * c;
                let len = kw * c;
                for (d, &g) in data[row..row + len].iter_mut().zip(&patch[k..k + len]) {
                    *d = *d + g;
                }
                k += len;
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[3] != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects T x H x W x {} input, got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let od = self.output_dims(x.shape())?;
        let k = self.patch_len();
        let mut out = Vec::with_capacity(od.iter().product::<usize>() * self.out_channels);
        let mut patch = vec![T::zero(); k];
        for t in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    self.gather_patch(x, [t, y, xx], &mut patch);
                    for (oc, row) in self.weight.chunks_exact(k).enumerate() {
                        let mut acc = self.bias[oc];
                        for (&a, &b) in row.iter().zip(&patch) {
                            acc = acc + a * b;
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Tensor::new(vec![od[0], od[1], od[2], self.out_channels], out)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(&self, x: &Tensor<T>, dout: &[T], grad: &mut Conv3d<T>, need_input: bool) -> Option<Tensor<T>> {
        let od = self.output_dims(x.shape()).expect("validated in forward");
        let k = self.patch_len();
        let mut patch = vec![T::zero(); k];
        let mut dpatch = vec![T::zero(); k];
        let mut dx = need_input.then(|| Tensor::zeros(x.shape().to_vec()));
        let mut cell = 0;
        for t in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let pos = [t, y, xx];
                    self.gather_patch(x, pos, &mut patch);
                    let g_out = &dout[cell * self.out_channels..(cell + 1) * self.out_channels];
                    if dx.is_some() {
                        dpatch.iter_mut().for_each(|v| *v = T::zero());
                    }
                    for (oc, &g) in g_out.iter().enumerate() {
                        if g == T::zero() {
                            continue;
                        }
                        grad.bias[oc] = grad.bias[oc] + g;
                        let gw = &mut grad.weight[oc * k..(oc + 1) * k];
                        for (w, &p) in gw.iter_mut().zip(&patch) {
                            *w = *w + g * p;
                        }
                        if dx.is_some() {
                            let wrow = &self.weight[oc * k..(oc + 1) * k];
                            for (d, &w) in dpatch.iter_mut().zip(wrow) {
                                *d = *d + g * w;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        self.scatter_patch(dx, pos, &dpatch);
                    }
                    cell += 1;
                }
            }
        }
        dx
    }

    pub fn cast<U: Scalar>(&self) -> Conv3d<U> {
        Conv3d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Stack of [`Conv3d`] layers with ReLU between layers and `tanh` on the
/// last one, matching the output range of [`SequenceEncoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalEncoder<T> {
    pub layers: Vec<Conv3d<T>>,
}

/// Layer inputs recorded during the forward pass.
#[derive(Clone, Debug)]
pub struct ConvTrace<T> {
    inputs: Vec<Tensor<T>>,
    output: Vec<T>,
}

impl<T: Scalar> SpatioTemporalEncoder<T> {
    pub fn zeros(in_channels: usize, layers: &[ConvLayerConfig]) -> Self {
        let mut c = in_channels;
        let layers = layers
            .iter()
            .map(|cfg| {
                let l = Conv3d::zeros(c, cfg);
                c = cfg.out_channels;
                l
            })
            .collect();
        Self { layers }
    }

    pub fn random<R: Rng>(in_channels: usize, layers: &[ConvLayerConfig], rng: &mut R) -> Self {
        let mut c = in_channels;
        let mut layers: Vec<Conv3d<T>> = layers
            .iter()
            .map(|cfg| {
                let l = Conv3d::random(c, cfg, rng);
                c = cfg.out_channels;
                l
            })
            .collect();
        if let Some(last) = layers.last_mut() {
            // same positive start as the recurrent encoder
            last.bias.iter_mut().for_each(|b| *b = T::of(0.5));
        }
        Self { layers }
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Smallest (T, H, W) input the stack accepts.
    pub fn min_input(&self) -> [usize; 3] {
        let mut need = [1usize; 3];
        for layer in self.layers.iter().rev() {
            for axis in 0..3 {
                need[axis] = (need[axis] - 1) * layer.stride[axis] + layer.kernel[axis];
            }
        }
        need
    }

    pub fn forward(&self, x: &Tensor<T>, modality: &str) -> Result<(FeatureMap<T>, ConvTrace<T>)> {
        if x.rank() != 4 {
            return Err(Error::Shape(format!(
                "{modality}: expected rank-4 T x H x W x C input, got shape {:?}",
                x.shape()
            )));
        }
        let min = self.min_input();
        let names = ["time", "height", "width"];
        for axis in 0..3 {
            if x.shape()[axis] < min[axis] {
                return Err(Error::Shape(format!(
                    "{modality}: {} extent {} below the encoder minimum {}",
                    names[axis],
                    x.shape()[axis],
                    min[axis]
                )));
            }
        }
        if x.shape()[3] != self.in_channels() {
            return Err(Error::Shape(format!(
                "{modality}: channel extent {} does not match encoder input channels {}",
                x.shape()[3],
                self.in_channels()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut out = layer.forward(&h)?;
            let last = inputs.len() + 1 == self.layers.len();
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = if last { v.tanh() } else { crate::scalar::relu(*v) });
            inputs.push(std::mem::replace(&mut h, out));
        }
        let shape = h.shape().to_vec();
        let output = h.into_data();
        let fmap = FeatureMap::new(modality, shape[..3].to_vec(), shape[3], output.clone())?;
        Ok((fmap, ConvTrace { inputs, output }))
    }

    pub fn backward(&self, trace: &ConvTrace<T>, dfeatures: &[T], grad: &mut SpatioTemporalEncoder<T>) {
        let mut dout: Vec<T> = dfeatures
            .iter()
            .zip(&trace.output)
            .map(|(&g, &a)| g * (T::one() - a * a))
            .collect();
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            let dx = self.layers[l].backward(input, &dout, &mut grad.layers[l], l > 0);
            if let Some(dx) = dx {
                // input of layer l is the ReLU output of layer l-1
                dout = dx
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
                    .collect();
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> SpatioTemporalEncoder<U> {
        SpatioTemporalEncoder {
            layers: self.layers.iter().map(Conv3d::cast).collect(),
        }
    }
}

/// Elman cell `h_t = tanh(x_t W_in + h_{t-1} W_rec + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEncoder<T> {
    pub input_dim: usize,
    pub hidden: usize,
    /// `input_dim x hidden`
    pub w_in: Vec<T>,
    /// `hidden x hidden`
    pub w_rec: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SequenceTrace<T> {
    inputs: Vec<T>,
    states: Vec<T>,
}

impl<T: Scalar> SequenceEncoder<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            w_in: vec![T::zero(); input_dim * hidden],
            w_rec: vec![T::zero(); hidden * hidden],
            bias: vec![T::zero(); hidden],
        }
    }

    pub fn random<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut enc = Self::zeros(input_dim, hidden);
        let b_in = (3.0 / input_dim as f64).sqrt();
        let b_rec = 1.0 / (hidden as f64).sqrt();
        for w in enc.w_in.iter_mut() {
            *w = T::of(rng.gen_range(-b_in..b_in));
        }
        for w in enc.w_rec.iter_mut() {
            *w = T::of(rng.gen_range(-b_rec..b_rec));
        }
        // positive start keeps early concept scores above the aggregator's ReLU
        enc.bias.iter_mut().for_each(|b| *b = T::of(0.5));
        enc
    }

    /// Returns the per-step hidden states as a `T x hidden` feature map and
    /// the final hidden state.
    pub fn forward(&self, x: &Tensor<T>, modality: &str) -> Result<(FeatureMap<T>, Vec<T>, SequenceTrace<T>)> {
        if x.rank() != 2 {
            return Err(Error::Shape(format!(
                "{modality}: expected rank-2 T x F input, got shape {:?}",
                x.shape()
            )));
        }
        let (steps, f) = (x.shape()[0], x.shape()[1]);
        if steps == 0 {
            return Err(Error::InvalidInput(format!("{modality}: empty sequence")));
        }
        if f != self.input_dim {
            return Err(Error::Shape(format!(
                "{modality}: feature extent {f} does not match encoder input size {}",
                self.input_dim
            )));
        }
        let hd = self.hidden;
        let mut states = vec![T::zero(); steps * hd];
        let mut z = vec![T::zero(); hd];
        for t in 0..steps {
            z.copy_from_slice(&self.bias);
            let xt = &x.data()[t * f..(t + 1) * f];
            for (i, &xi) in xt.iter().enumerate() {
                for (zj, &w) in z.iter_mut().zip(&self.w_in[i * hd..(i + 1) * hd]) {
                    *zj = *zj + xi * w;
                }
            }
            if t > 0 {
                let (prev, _) = states.split_at(t * hd);
                let prev = &prev[(t - 1) * hd..];
                for (i, &hi) in prev.iter().enumerate() {
                    for (zj, &w) in z.iter_mut().zip(&self.w_rec[i * hd..(i + 1) * hd]) {
                        *zj = *zj + hi * w;
                    }
                }
            }
            for (s, &zj) in states[t * hd..(t + 1) * hd].iter_mut().zip(&z) {
                *s = zj.tanh();
            }
        }
        let last = states[(steps - 1) * hd..].to_vec();
        let fmap = FeatureMap::new(modality, vec![steps], hd, states.clone())?;
        Ok((
            fmap,
            last,
            SequenceTrace {
                inputs: x.data().to_vec(),
                states,
            },
        ))
    }

    /// Backpropagation through time given gradients w.r.t. every hidden state.
    pub fn backward(&self, trace: &SequenceTrace<T>, dstates: &[T], grad: &mut SequenceEncoder<T>) {
        let hd = self.hidden;
        let f = self.input_dim;
        let steps = trace.states.len() / hd;
        let mut carry = vec![T::zero(); hd];
        let mut dz = vec![T::zero(); hd];
        for t in (0..steps).rev() {
            let h = &trace.states[t * hd..(t + 1) * hd];
            for j in 0..hd {
                let dh = dstates[t * hd + j] + carry[j];
                dz[j] = dh * (T::one() - h[j] * h[j]);
            }
            for (b, &g) in grad.bias.iter_mut().zip(&dz) {
                *b = *b + g;
            }
            let xt = &trace.inputs[t * f..(t + 1) * f];
            for (i, &xi) in xt.iter().enumerate() {
                for (w, &g) in grad.w_in[i * hd..(i + 1) * hd].iter_mut().zip(&dz) {
                    *w = *w + xi * g;
                }
            }
            carry.iter_mut().for_each(|c| *c = T::zero());
            if t > 0 {
                let prev = &trace.states[(t - 1) * hd..t * hd];
                for (i, &hi) in prev.iter().enumerate() {
                    let wrow = &self.w_rec[i * hd..(i + 1) * hd];
                    let grow = &mut grad.w_rec[i * hd..(i + 1) * hd];
                    let mut acc = T::zero();
                    for k in 0..hd {
                        grow[k] = grow[k] + hi * dz[k];
                        acc = acc + wrow[k] * dz[k];
                    }
                    carry[i] = acc;
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> SequenceEncoder<U> {
        SequenceEncoder {
            input_dim: self.input_dim,
            hidden: self.hidden,
            w_in: cast_vec(&self.w_in),
            w_rec: cast_vec(&self.w_rec),
            bias: cast_vec(&self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone<T> {
    Spatiotemporal(SpatioTemporalEncoder<T>),
    Sequential(SequenceEncoder<T>),
}

#[derive(Clone, Debug)]
pub enum BackboneTrace<T> {
    Spatiotemporal(ConvTrace<T>),
    Sequential(SequenceTrace<T>),
}

impl<T: Scalar> Backbone<T> {
    pub fn from_config<R: Rng>(cfg: &BackboneConfig, feature_dim: usize, rng: Option<&mut R>) -> Self {
        match (cfg, rng) {
            (BackboneConfig::Spatiotemporal { in_channels, layers }, Some(rng)) => {
                Backbone::Spatiotemporal(SpatioTemporalEncoder::random(*in_channels, layers, rng))
            }
            (BackboneConfig::Spatiotemporal { in_channels, layers }, None) => {
                Backbone::Spatiotemporal(SpatioTemporalEncoder::zeros(*in_channels, layers))
            }
            (BackboneConfig::Sequential { input_dim }, Some(rng)) => {
                Backbone::Sequential(SequenceEncoder::random(*input_dim, feature_dim, rng))
            }
            (BackboneConfig::Sequential { input_dim }, None) => {
                Backbone::Sequential(SequenceEncoder::zeros(*input_dim, feature_dim))
            }
        }
    }

    pub fn encode(&self, x: &Tensor<T>, modality: &str) -> Result<(FeatureMap<T>, BackboneTrace<T>)> {
        match self {
            Backbone::Spatiotemporal(enc) => {
                let (f, tr) = enc.forward(x, modality)?;
                Ok((f, BackboneTrace::Spatiotemporal(tr)))
            }
            Backbone::Sequential(enc) => {
                let (f, _, tr) = enc.forward(x, modality)?;
                Ok((f, BackboneTrace::Sequential(tr)))
            }
        }
    }

    pub fn backward(&self, trace: &BackboneTrace<T>, dfeatures: &[T], grad: &mut Backbone<T>) {
        match (self, trace, grad) {
            (Backbone::Spatiotemporal(e), BackboneTrace::Spatiotemporal(t), Backbone::Spatiotemporal(g)) => {
                e.backward(t, dfeatures, g)
            }
            (Backbone::Sequential(e), BackboneTrace::Sequential(t), Backbone::Sequential(g)) => {
                e.backward(t, dfeatures, g)
            }
            _ => unreachable!("trace and gradient buffers mirror the backbone variant"),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        match self {
            Backbone::Spatiotemporal(e) => Backbone::Spatiotemporal(e.cast()),
            Backbone::Sequential(e) => Backbone::Sequential(e.cast()),
        }
    }
}

/// Runs the convolutional encoder over a `T x H x W x C_in` clip.
pub fn encode_spatiotemporal<T: Scalar>(
    x: &Tensor<T>,
    encoder: &SpatioTemporalEncoder<T>,
    modality: &str,
) -> Result<FeatureMap<T>> {
    encoder.forward(x, modality).map(|(f, _)| f)
}

/// Runs the recurrent encoder over a `T x F` sequence; returns the per-step
/// feature map and the final hidden state.
pub fn encode_sequence<T: Scalar>(
    x: &Tensor<T>,
    encoder: &SequenceEncoder<T>,
    modality: &str,
) -> Result<(FeatureMap<T>, Vec<T>)> {
    encoder.forward(x, modality).map(|(f, last, _)| (f, last))
}
