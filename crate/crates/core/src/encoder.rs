//! Waveform encoder: a stack of strided convolution blocks followed by bidirectional
//! transformer layers. The output is the last layer's hidden states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv_output_len, gelu, gelu_backward, join, Block, BlockCache, Conv1d, Init, LayerNorm, Linear, LnCache, Params};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub layers: Vec<ConvLayer>,
}

impl ConvSpec {
    fn from_lists(channels: usize, kernels: &[usize], strides: &[usize]) -> Self {
        Self {
            layers: kernels.iter().zip(strides).map(|(&kernel, &stride)| ConvLayer { channels, kernel, stride }).collect(),
        }
    }

    /// Seven 512-channel blocks, kernels (10,3,3,3,3,2,2), strides (5,2,2,2,2,2,2): 20 ms hop at 16 kHz.
    pub fn paper() -> Self {
        Self::from_lists(512, &[10, 3, 3, 3, 3, 2, 2], &[5, 2, 2, 2, 2, 2, 2])
    }

    /// Three 64-channel blocks, kernels (10,3,3), strides (5,2,2): 10 ms hop at 2 kHz.
    pub fn toy() -> Self {
        Self::from_lists(64, &[10, 3, 3], &[5, 2, 2])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("conv spec needs at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !(l.kernel >= l.stride && l.stride >= 1 && l.channels >= 1) {
                return Err(Error::Config(format!("conv layer {i}: need kernel >= stride >= 1, got {l:?}")));
            }
        }
        Ok(())
    }

    /// Product of strides: samples between consecutive output frames.
    pub fn hop(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Smallest input length producing one output frame.
    pub fn receptive_field(&self) -> usize {
        self.layers.iter().rev().fold(1, |need, l| (need - 1) * l.stride + l.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }
}

/// Number of frames the conv stack produces: `L <- floor((L - k) / s) + 1` per layer.
pub fn conv_output_length(n_samples: usize, spec: &ConvSpec) -> Result<usize> {
    let mut len = n_samples;
    for l in &spec.layers {
        len = conv_output_len(len, l.kernel, l.stride).ok_or(Error::TooShort { needed: spec.receptive_field(), got: n_samples })?;
    }
    Ok(len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub conv: ConvSpec,
    pub n_transformer_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { conv: ConvSpec::toy(), n_transformer_layers: 2, model_dim: 64, n_heads: 4, ffn_dim: 256 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("encoder model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads)));
        }
        Ok(())
    }
}

/// A `[T x D]` feature matrix with its frame geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<F> {
    pub values: Mat<F>,
    pub frame_stride_samples: usize,
    pub sample_rate: u32,
}

impl<F: Scalar> FeatureSequence<F> {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<F> {
    pub conv: Conv1d<F>,
    pub norm: LayerNorm<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechEncoder<F> {
    pub config: EncoderConfig,
    pub convs: Vec<ConvBlock<F>>,
    pub proj: Linear<F>,
    pub blocks: Vec<Block<F>>,
    pub norm: LayerNorm<F>,
}

struct ConvCache<F> {
    input: Mat<F>,
    norm: LnCache<F>,
    pre_act: Mat<F>,
}

pub struct EncoderCache<F> {
    convs: Vec<ConvCache<F>>,
    proj_in: Mat<F>,
    blocks: Vec<BlockCache<F>>,
    norm: LnCache<F>,
}

/// Fixed sinusoidal position table, `[T x D]`.
pub fn sinusoidal_positions<F: Scalar>(t: usize, d: usize) -> Mat<F> {
    Mat::from_fn(t, d, |pos, i| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * freq;
        F::from_f64(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

impl<F: Scalar> SpeechEncoder<F> {
    pub fn new(config: &EncoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let mut c_in = 1;
        let mut convs = Vec::with_capacity(config.conv.layers.len());
        for l in &config.conv.layers {
            convs.push(ConvBlock { conv: Conv1d::new(init, c_in, l.channels, l.kernel, l.stride), norm: LayerNorm::new(l.channels) });
            c_in = l.channels;
        }
        let proj = Linear::new(init, c_in, config.model_dim);
        let blocks = (0..config.n_transformer_layers)
            .map(|_| Block::new(init, config.model_dim, config.n_heads, config.ffn_dim))
            .collect();
        Ok(Self { config: config.clone(), convs, proj, blocks, norm: LayerNorm::new(config.model_dim) })
    }

    fn check_input(&self, waveform: &[F]) -> Result<usize> {
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        conv_output_length(waveform.len(), &self.config.conv)
    }

    pub fn encode(&self, waveform: &[F], sample_rate: u32) -> Result<FeatureSequence<F>> {
        Ok(self.forward(waveform, sample_rate)?.0)
    }

    pub fn forward(&self, waveform: &[F], sample_rate: u32) -> Result<(FeatureSequence<F>, EncoderCache<F>)> {
        self.check_input(waveform)?;
        let mut h = Mat::from_vec(waveform.len(), 1, waveform.to_vec());
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        for cb in &self.convs {
            let pre = cb.conv.forward(&h);
            let (normed, norm) = cb.norm.forward(&pre);
            let out = gelu(&normed);
            conv_caches.push(ConvCache { input: h, norm, pre_act: normed });
            h = out;
        }
        let proj_in = h;
        let mut x = self.proj.forward(&proj_in);
        x.add_inplace(&sinusoidal_positions(x.rows(), x.cols()));
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, false);
            block_caches.push(c);
            x = y;
        }
        let (out, norm) = self.norm.forward(&x);
        let fs = FeatureSequence { values: out, frame_stride_samples: self.config.conv.hop(), sample_rate };
        Ok((fs, EncoderCache { convs: conv_caches, proj_in, blocks: block_caches, norm }))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output features) into `grads`.
    pub fn backward(&self, cache: &EncoderCache<F>, d_out: &Mat<F>, grads: &mut Self) {
        let mut dx = self.norm.backward(&cache.norm, d_out, Some(&mut grads.norm));
        for (i, b) in self.blocks.iter().enumerate().rev() {
            dx = b.backward(&cache.blocks[i], &dx, Some(&mut grads.blocks[i]));
        }
        let mut dh = self.proj.backward(&cache.proj_in, &dx, Some(&mut grads.proj));
        for (i, cb) in self.convs.iter().enumerate().rev() {
            let c = &cache.convs[i];
            let d_norm = gelu_backward(&c.pre_act, &dh);
            let d_pre = cb.norm.backward(&c.norm, &d_norm, Some(&mut grads.convs[i].norm));
            let need_dx = i > 0;
            match cb.conv.backward(&c.input, &d_pre, Some(&mut grads.convs[i].conv), need_dx) {
                Some(d) => dh = d,
                None => break,
            }
        }
    }
}

impl<F: Scalar> Params<F> for SpeechEncoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.conv.visit(&join(prefix, &format!("conv{i}")), f);
            c.norm.visit(&join(prefix, &format!("conv{i}_norm")), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.conv.visit_mut(&join(prefix, &format!("conv{i}")), f);
            c.norm.visit_mut(&join(prefix, &format!("conv{i}_norm")), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
