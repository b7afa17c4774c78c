//! Two-stage training of the encoder and adapter against a frozen LM.
//!
//! Stage 1 teaches transcription behind the `<transcript>` prefix; stage 2 teaches the score
//! string behind `<Pronunciation Assessment>`. The LM never receives an update in either stage.

pub mod checkpoint;
mod optim;
mod pretrain;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use optim::{clip_grad_norm, AdamW};
pub use pretrain::{frame_labels, pretrain_lm, PretrainConfig, TaskMix};

use crate::corpus::{mix_seed, Utterance};
use crate::error::{Error, Result};
use crate::lm::{build_text_input, format_score, DecoderLm, PromptBundle, ScorePair, Task, TokenId, Vocabulary};
use crate::model::{Model, ModelConfig, SpeechFrontEnd};
use crate::nn::Params;

/// Which groups are frozen (`true`) during a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub adapter: bool,
    pub lm: bool,
}

pub fn freeze_mask(stage: u8) -> Result<FreezeFlags> {
    match stage {
        1 | 2 => Ok(FreezeFlags { encoder: false, adapter: false, lm: true }),
        s => Err(Error::InvalidStage(s)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    None,
    Stage1,
    Stage2,
}

/// Where a trained state started from: the source's provenance and a digest of its bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub provenance: Provenance,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub model: Model<f32>,
    pub freeze: FreezeFlags,
    pub seed: u64,
    pub provenance: Provenance,
    pub init_from: Option<InitRecord>,
    /// Free-form description of where the LM weights came from.
    pub lm_origin: String,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    config: ModelConfig,
    vocabulary: Vec<String>,
    freeze_flags: FreezeFlags,
    seed: u64,
    stage_provenance: Provenance,
    init_from: Option<InitRecord>,
    lm_origin: String,
}

impl ModelState {
    /// Fresh encoder and adapter around the given LM.
    pub fn fresh(config: &ModelConfig, seed: u64, lm: DecoderLm<f32>, lm_origin: &str) -> Result<Self> {
        Ok(Self {
            model: Model::with_lm(config, seed, lm)?,
            freeze: freeze_mask(1)?,
            seed,
            provenance: Provenance::None,
            init_from: None,
            lm_origin: lm_origin.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = StateMeta {
            kind: "model".into(),
            config: self.model.config.clone(),
            vocabulary: Vocabulary::default().tokens().to_vec(),
            freeze_flags: self.freeze,
            seed: self.seed,
            stage_provenance: self.provenance,
            init_from: self.init_from.clone(),
            lm_origin: self.lm_origin.clone(),
        };
        let mut tensors = self.model.front.named();
        let lm_named: Vec<_> = {
            let mut v = Vec::new();
            self.model.lm.visit("lm", &mut |n, m| v.push((n, m)));
            v
        };
        tensors.extend(lm_named);
        checkpoint::encode(serde_json::to_value(meta)?, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = checkpoint::decode(bytes)?;
        let meta: StateMeta = serde_json::from_value(d.meta)?;
        if meta.kind != "model" {
            return Err(Error::Checkpoint(format!("expected a model checkpoint, found kind {:?}", meta.kind)));
        }
        Vocabulary::from_tokens(meta.vocabulary)?;
        let mut model = Model::new(&meta.config, 0)?;
        checkpoint::restore(&mut model.front, "", &mut d.tensors)?;
        checkpoint::restore(&mut model.lm, "lm", &mut d.tensors)?;
        if let Some(extra) = d.tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            model,
            freeze: meta.freeze_flags,
            seed: meta.seed,
            provenance: meta.stage_provenance,
            init_from: meta.init_from,
            lm_origin: meta.lm_origin,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// Saves an LM on its own, e.g. the text-pretrained weights shared by several runs.
pub fn save_lm(lm: &DecoderLm<f32>, origin: &str, path: &Path) -> Result<()> {
    let meta = json!({ "kind": "lm", "config": lm.config, "vocabulary": Vocabulary::default().tokens(), "origin": origin });
    let mut v = Vec::new();
    lm.visit("lm", &mut |n, m| v.push((n, m)));
    checkpoint::write_atomic(path, &checkpoint::encode(meta, &v)?)
}

/// Loads an LM saved with [`save_lm`] and returns it with its origin string.
pub fn load_lm(path: &Path) -> Result<(DecoderLm<f32>, String)> {
    let mut d = checkpoint::read(path)?;
    if d.meta["kind"] != "lm" {
        return Err(Error::Checkpoint(format!("{} is not an LM checkpoint", path.display())));
    }
    let config = serde_json::from_value(d.meta["config"].clone())?;
    let mut lm = DecoderLm::new(&config, &mut crate::nn::Init::new(0))?;
    checkpoint::restore(&mut lm, "lm", &mut d.tensors)?;
    Ok((lm, d.meta["origin"].as_str().unwrap_or_default().to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub use_prompt_text: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self { stage: 1, epochs: 20, learning_rate: 1e-3, batch_size: 16, seed: 0, use_prompt_text: false, weight_decay: 0.01, grad_clip: 1.0 }
    }

    pub fn stage2() -> Self {
        Self { stage: 2, epochs: 20, learning_rate: 5e-4, use_prompt_text: true, ..Self::stage1() }
    }

    pub fn validate(&self) -> Result<()> {
        freeze_mask(self.stage)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.stage == 1 && self.use_prompt_text {
            return Err(Error::Config("stage 1 (transcription) takes no prompt text".into()));
        }
        Ok(())
    }
}

/// Text input and target string for one utterance.
pub fn make_target(vocab: &Vocabulary, stage: u8, utt: &Utterance, use_prompt_text: bool) -> Result<(PromptBundle, String)> {
    match stage {
        1 => Ok((build_text_input(vocab, Task::Asr, None)?, utt.spoken_text.clone())),
        2 => {
            let prompt = use_prompt_text.then_some(utt.prompt_text.as_str());
            let score = ScorePair::new(utt.accuracy, utt.fluency)?;
            Ok((build_text_input(vocab, Task::Scoring, prompt)?, format_score(score)))
        }
        s => Err(Error::InvalidStage(s)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("epoch,split,loss\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.split, r.loss));
    }
    s
}

struct Example {
    bundle: PromptBundle,
    target: Vec<TokenId>,
}

/// Index batches of similar length: sort by sample count (ties by index), then chunk.
pub fn length_buckets(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.sort_by_key(|&i| (lengths[i], i));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Mean loss over `batch` and the summed-then-averaged gradient. Items run in parallel;
/// their gradients are added in batch order so the result does not depend on scheduling.
fn batch_grad(model: &Model<f32>, data: &[Utterance], ex: &[Example], batch: &[usize]) -> Result<(f64, SpeechFrontEnd<f32>)> {
    let parts: Vec<Result<(f32, SpeechFrontEnd<f32>)>> = batch
        .par_iter()
        .map(|&i| {
            let mut g = model.front.zeros_like();
            let u = &data[i];
            let l = model.loss(&u.samples, u.sample_rate, &ex[i].bundle, &ex[i].target, Some(&mut g))?;
            Ok((l, g))
        })
        .collect();
    let mut total = model.front.zeros_like();
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        if !l.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        loss += l as f64;
        total.accumulate(&g);
    }
    total.scale_(1.0 / batch.len() as f32);
    Ok((loss / batch.len() as f64, total))
}

/// Mean teacher-forced loss over `data` without updating anything.
pub fn mean_loss(vocab: &Vocabulary, model: &Model<f32>, stage: u8, use_prompt_text: bool, data: &[Utterance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let losses: Vec<Result<f64>> = data
        .par_iter()
        .map(|u| {
            let (b, t) = make_target(vocab, stage, u, use_prompt_text)?;
            Ok(model.loss(&u.samples, u.sample_rate, &b, &vocab.tokenize(&t)?, None)? as f64)
        })
        .collect();
    Ok(losses.into_iter().sum::<Result<f64>>()? / data.len() as f64)
}

/// Runs one training stage. `valid`, when non-empty, gets a per-epoch loss row too.
pub fn train_stage(
    config: &TrainConfig,
    data: &[Utterance],
    valid: &[Utterance],
    init: ModelState,
) -> Result<(ModelState, Vec<LossRecord>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let vocab = Vocabulary::default();
    let ex: Vec<Example> = data
        .iter()
        .map(|u| {
            let (bundle, t) = make_target(&vocab, config.stage, u, config.use_prompt_text)?;
            Ok(Example { bundle, target: vocab.tokenize(&t)? })
        })
        .collect::<Result<_>>()?;
    let lengths: Vec<usize> = data.iter().map(|u| u.samples.len()).collect();
    let mut batches = length_buckets(&lengths, config.batch_size);

    let frozen_lm = init.model.lm.clone();
    let mut state = init;
    state.freeze = freeze_mask(config.stage)?;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        batches.shuffle(&mut rng);
        let mut sum = 0.0;
        for b in &batches {
            let (loss, mut g) = batch_grad(&state.model, data, &ex, b)?;
            clip_grad_norm(&mut g, config.grad_clip);
            opt.step(&mut state.model.front, &g);
            sum += loss * b.len() as f64;
        }
        log.push(LossRecord { epoch, split: "train".into(), loss: sum / data.len() as f64 });
        if !valid.is_empty() {
            let l = mean_loss(&vocab, &state.model, config.stage, config.use_prompt_text, valid)?;
            log.push(LossRecord { epoch, split: "valid".into(), loss: l });
        }
    }
    if state.model.lm != frozen_lm {
        return Err(Error::Checkpoint("frozen LM parameters changed during training".into()));
    }
    state.provenance = if config.stage == 1 { Provenance::Stage1 } else { Provenance::Stage2 };
    Ok((state, log))
}

/// Stage-2 starting point from a finished stage-1 state: same weights, provenance recorded.
pub fn init_from_checkpoint(source: &ModelState) -> Result<ModelState> {
    let mut s = source.clone();
    s.init_from = Some(InitRecord { provenance: source.provenance, sha256: source.sha256()? });
    s.provenance = Provenance::None;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_policy_is_the_same_in_both_stages() {
        let f = FreezeFlags { encoder: false, adapter: false, lm: true };
        assert_eq!(freeze_mask(1).unwrap(), f);
        assert_eq!(freeze_mask(2).unwrap(), f);
        assert!(matches!(freeze_mask(3), Err(Error::InvalidStage(3))));
    }

    #[test]
    fn buckets_group_by_length() {
        let b = length_buckets(&[50, 10, 30, 20, 40], 2);
        assert_eq!(b, vec![vec![1, 3], vec![2, 4], vec![0]]);
    }
}
