//! Encoder, adapter and LM wired together.

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig};
use crate::corpus::mix_seed;
use crate::encoder::{conv_output_length, EncoderConfig, FeatureSequence, SpeechEncoder};
use crate::error::{Error, Result};
use crate::lm::{DecodeOptions, DecoderLm, LmConfig, PromptBundle, TokenId, Vocabulary};
use crate::nn::{join, Init, Params};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub lm: LmConfig,
}


impl ModelConfig {
    /// Checks each section and the dimension chain encoder -> adapter -> LM.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate()?;
        self.lm.validate()?;
        if self.adapter.in_dim != self.encoder.model_dim {
            return Err(Error::Config(format!(
                "adapter.in_dim {} must equal encoder.model_dim {}",
                self.adapter.in_dim, self.encoder.model_dim
            )));
        }
        if self.adapter.out_dim != self.lm.model_dim {
            return Err(Error::Config(format!("adapter.out_dim {} must equal lm.model_dim {}", self.adapter.out_dim, self.lm.model_dim)));
        }
        Ok(())
    }

    /// Samples between consecutive LM-side speech frames.
    pub fn frame_hop(&self) -> usize {
        self.encoder.conv.hop() * self.adapter.pool_stride
    }

    /// Number of speech embeddings the LM sees for a waveform of `n_samples`.
    pub fn speech_len(&self, n_samples: usize) -> Result<usize> {
        self.adapter.output_len(conv_output_length(n_samples, &self.encoder.conv)?)
    }
}

/// The trainable part: encoder plus adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFrontEnd<F> {
    pub encoder: SpeechEncoder<F>,
    pub adapter: Adapter<F>,
}

impl<F: Scalar> SpeechFrontEnd<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: SpeechEncoder::new(&config.encoder, &mut Init::new(mix_seed(seed, 1)))?,
            adapter: Adapter::new(&config.adapter, &mut Init::new(mix_seed(seed, 2)))?,
        })
    }

    pub fn embed(&self, waveform: &[F], sample_rate: u32) -> Result<FeatureSequence<F>> {
        self.adapter.adapt(&self.encoder.encode(waveform, sample_rate)?)
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_();
        g
    }
}

impl<F: Scalar> Params<F> for SpeechFrontEnd<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub front: SpeechFrontEnd<F>,
    pub lm: DecoderLm<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_lm(config, seed, DecoderLm::new(&config.lm, &mut Init::new(mix_seed(seed, 3)))?)
    }

    pub fn with_lm(config: &ModelConfig, seed: u64, lm: DecoderLm<F>) -> Result<Self> {
        config.validate()?;
        if lm.config != config.lm {
            return Err(Error::ShapeMismatch("LM weights were built for a different lm config".into()));
        }
        Ok(Self { config: config.clone(), front: SpeechFrontEnd::new(config, seed)?, lm })
    }

    /// Teacher-forced loss for one utterance. When `grads` is given, the encoder and adapter
    /// gradients are added to it; the LM is treated as frozen.
    pub fn loss(
        &self,
        waveform: &[F],
        sample_rate: u32,
        bundle: &PromptBundle,
        target: &[TokenId],
        grads: Option<&mut SpeechFrontEnd<F>>,
    ) -> Result<F> {
        let (h_s, enc_cache) = self.front.encoder.forward(waveform, sample_rate)?;
        let (h_t, ad_cache) = self.front.adapter.forward(&h_s)?;
        let (loss, lm_cache) = self.lm.forward_loss(&h_t.values, bundle, target)?;
        if let Some(g) = grads {
            let d_ht = self.lm.backward(&lm_cache, None);
            let d_hs = self.front.adapter.backward(&ad_cache, &d_ht, &mut g.adapter);
            self.front.encoder.backward(&enc_cache, &d_hs, &mut g.encoder);
        }
        Ok(loss)
    }

    pub fn generate(
        &self,
        vocab: &Vocabulary,
        waveform: &[F],
        sample_rate: u32,
        bundle: &PromptBundle,
        opts: DecodeOptions,
    ) -> Result<String> {
        let h = self.front.embed(waveform, sample_rate)?;
        Ok(vocab.detokenize(&self.lm.generate(vocab, &h.values, bundle, opts)?))
    }
}
