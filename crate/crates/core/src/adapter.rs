//! Modality adapter: one shared pooling convolution shortens the speech sequence, a residual
//! multi-head self-attention layer mixes it, and a linear map lands it in the LM embedding space.
//!
//! The pooled, normalized tensor is computed once and used as the input of the Q, K and V
//! projections alike.

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::nn::{conv_output_len, join, AttnCache, Attention, Conv1d, Init, LayerNorm, Linear, LnCache, Params};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub n_heads: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { pool_kernel: 2, pool_stride: 2, n_heads: 4, in_dim: 64, out_dim: 128 }
    }
}

impl AdapterConfig {
    /// One 16-head attention layer over 1024-d speech features, pooling kernel = stride = 2.
    pub fn paper(in_dim: usize, out_dim: usize) -> Self {
        Self { pool_kernel: 2, pool_stride: 2, n_heads: 16, in_dim, out_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pool_kernel >= self.pool_stride && self.pool_stride >= 1) {
            return Err(Error::Config("adapter needs pool_kernel >= pool_stride >= 1".into()));
        }
        if self.n_heads == 0 || !self.in_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("adapter in_dim {} not divisible by n_heads {}", self.in_dim, self.n_heads)));
        }
        Ok(())
    }

    pub fn output_len(&self, t: usize) -> Result<usize> {
        conv_output_len(t, self.pool_kernel, self.pool_stride).ok_or(Error::TooShort { needed: self.pool_kernel, got: t })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<F> {
    pub config: AdapterConfig,
    pub pool: Conv1d<F>,
    pub norm: LayerNorm<F>,
    pub attn: Attention<F>,
    pub proj: Linear<F>,
}

pub struct AdapterCache<F> {
    input: Mat<F>,
    pooled: Mat<F>,
    norm: LnCache<F>,
    attn: AttnCache<F>,
    residual: Mat<F>,
}

impl<F> AdapterCache<F> {
    pub fn pooled(&self) -> &Mat<F> {
        &self.pooled
    }

    pub fn attn(&self) -> &AttnCache<F> {
        &self.attn
    }
}

impl<F: Scalar> Adapter<F> {
    pub fn new(config: &AdapterConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            pool: Conv1d::new(init, config.in_dim, config.in_dim, config.pool_kernel, config.pool_stride),
            norm: LayerNorm::new(config.in_dim),
            attn: Attention::new(init, config.in_dim, config.n_heads),
            proj: Linear::new(init, config.in_dim, config.out_dim),
        })
    }

    /// The pooling convolution alone.
    pub fn shared_pool(&self, x: &FeatureSequence<F>) -> Result<FeatureSequence<F>> {
        self.check(x)?;
        Ok(FeatureSequence {
            values: self.pool.forward(&x.values),
            frame_stride_samples: x.frame_stride_samples * self.config.pool_stride,
            sample_rate: x.sample_rate,
        })
    }

    fn check(&self, x: &FeatureSequence<F>) -> Result<()> {
        if x.dim() != self.config.in_dim {
            return Err(Error::ShapeMismatch(format!("adapter expects {}-d features, got {}", self.config.in_dim, x.dim())));
        }
        self.config.output_len(x.len()).map(|_| ())
    }

    pub fn adapt(&self, h_s: &FeatureSequence<F>) -> Result<FeatureSequence<F>> {
        Ok(self.forward(h_s)?.0)
    }

    pub fn forward(&self, h_s: &FeatureSequence<F>) -> Result<(FeatureSequence<F>, AdapterCache<F>)> {
        self.check(h_s)?;
        let pooled = self.pool.forward(&h_s.values);
        let (normed, norm) = self.norm.forward(&pooled);
        let (mixed, attn) = self.attn.forward(&normed, false);
        let mut residual = pooled.clone();
        residual.add_inplace(&mixed);
        let out = self.proj.forward(&residual);
        let fs = FeatureSequence {
            values: out,
            frame_stride_samples: h_s.frame_stride_samples * self.config.pool_stride,
            sample_rate: h_s.sample_rate,
        };
        Ok((fs, AdapterCache { input: h_s.values.clone(), pooled, norm, attn, residual }))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input features.
    pub fn backward(&self, cache: &AdapterCache<F>, d_out: &Mat<F>, grads: &mut Self) -> Mat<F> {
        let d_res = self.proj.backward(&cache.residual, d_out, Some(&mut grads.proj));
        let d_normed = self.attn.backward(&cache.attn, &d_res, Some(&mut grads.attn));
        let mut d_pooled = self.norm.backward(&cache.norm, &d_normed, Some(&mut grads.norm));
        d_pooled.add_inplace(&d_res);
        self.pool.backward(&cache.input, &d_pooled, Some(&mut grads.pool), true).expect("need_dx")
    }
}

impl<F: Scalar> Params<F> for Adapter<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        self.pool.visit(&join(prefix, "pool"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        self.pool.visit_mut(&join(prefix, "pool"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
