//! The single JSON run configuration and its presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::corpus::CorpusConfig;
use crate::encoder::{ConvSpec, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{AblationConfig, EvalConfig};
use crate::lm::{DecoderLm, LmConfig};
use crate::model::ModelConfig;
use crate::train::{load_lm, pretrain_lm, save_lm, PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Seeds the encoder and adapter initialization.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub lm: LmConfig,
    pub lm_pretrain: PretrainConfig,
    pub train_stage1: TrainConfig,
    pub train_stage2: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key, everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            seed: 1,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            lm: LmConfig::default(),
            lm_pretrain: PretrainConfig::default(),
            train_stage1: TrainConfig::stage1(),
            train_stage2: TrainConfig::stage2(),
            eval: EvalConfig::default(),
        }
    }

    /// Full-scale hyperparameters: 16 kHz audio, the 7-layer 512-channel conv stack, a
    /// 1024-d 24-layer encoder, a 16-head adapter and a 4096-d 32-layer LM, two epochs per stage.
    /// Kept for reference; it is far too large to train here.
    pub fn paper() -> Self {
        let toy = Self::toy();
        Self {
            preset: "paper".into(),
            corpus: CorpusConfig { sample_rate: 16000, ..toy.corpus },
            encoder: EncoderConfig { conv: ConvSpec::paper(), n_transformer_layers: 24, model_dim: 1024, n_heads: 16, ffn_dim: 4096 },
            adapter: AdapterConfig::paper(1024, 4096),
            lm: LmConfig { n_layers: 32, model_dim: 4096, n_heads: 32, ffn_dim: 11008, max_seq_len: 2048, ..LmConfig::default() },
            train_stage1: TrainConfig { epochs: 2, ..toy.train_stage1 },
            train_stage2: TrainConfig { epochs: 2, ..toy.train_stage2 },
            ..toy
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("preset: unknown preset {other:?} (expected \"toy\" or \"paper\")"))),
        }
    }

    /// Parses a possibly partial document: fields not given come from the named preset
    /// (default "toy"). The result is validated.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text)?;
        if !patch.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let preset = match patch.get("preset") {
            None => "toy",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(Error::Config("preset: must be a string".into())),
        };
        let mut base = serde_json::to_value(Self::preset(preset)?)?;
        merge(&mut base, patch);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.clone(), adapter: self.adapter.clone(), lm: self.lm.clone() }
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            model: self.model(),
            train_stage1: self.train_stage1.clone(),
            train_stage2: self.train_stage2.clone(),
            eval: self.eval.clone(),
        }
    }

    /// Section-by-section checks; errors name the offending section.
    pub fn validate(&self) -> Result<()> {
        let at = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{section}: {m}")),
                other => Error::Config(format!("{section}: {other}")),
            })
        };
        at("preset", Self::preset(&self.preset).map(|_| ()))?;
        at("corpus", self.corpus.validate())?;
        at("encoder", self.encoder.validate())?;
        at("adapter", self.adapter.validate())?;
        at("lm", self.lm.validate())?;
        at("lm_pretrain", self.lm_pretrain.validate())?;
        self.model().validate()?;
        at("train_stage1", self.train_stage1.validate())?;
        at("train_stage2", self.train_stage2.validate())?;
        if self.train_stage1.stage != 1 {
            return Err(Error::Config("train_stage1.stage: must be 1".into()));
        }
        if self.train_stage2.stage != 2 {
            return Err(Error::Config("train_stage2.stage: must be 2".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the compact resolved JSON.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Key for the cached pretrained LM: everything its weights depend on.
    pub fn lm_key(&self) -> String {
        // split sizes do not reach the pretraining data
        let corpus = CorpusConfig { n_train: 0, n_test: 0, ..self.corpus.clone() };
        let v = serde_json::json!({
            "corpus": corpus,
            "conv": self.encoder.conv,
            "pool": [self.adapter.pool_kernel, self.adapter.pool_stride],
            "lm": self.lm,
            "lm_pretrain": self.lm_pretrain,
        });
        short_hash(&serde_json::to_vec(&v).expect("json"))
    }
}

impl RunConfig {
    /// The text-pretrained LM for this config, read from `cache_dir` if an entry for
    /// [`lm_key`](Self::lm_key) exists, otherwise trained and stored there.
    /// Returns the weights and an origin string naming the key.
    pub fn pretrained_lm(&self, cache_dir: &Path, progress: impl FnMut(usize, f64)) -> Result<(DecoderLm<f32>, String)> {
        let key = self.lm_key();
        let path = cache_dir.join(format!("lm-{key}.ckpt"));
        let origin = format!("text-pretrained:{key}");
        if path.exists() {
            let (lm, stored) = load_lm(&path)?;
            if stored != origin || lm.config != self.lm {
                return Err(Error::Checkpoint(format!("{} does not match this config", path.display())));
            }
            return Ok((lm, origin));
        }
        let lm = pretrain_lm(&self.lm_pretrain, &self.model(), &self.corpus, progress)?;
        save_lm(&lm, &origin, &path)?;
        Ok((lm, origin))
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..12].to_string()
}
