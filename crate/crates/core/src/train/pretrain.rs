//! Text-side pretraining of the LM before it is frozen.
//!
//! Each example renders a fresh utterance and feeds the LM, in place of speech, the token
//! embedding of whatever symbol occupies each speech frame (space for silence) plus Gaussian
//! noise. Targets are the transcript or the score string, exactly as in the two speech stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW};
use crate::corpus::{mix_seed, render_with_segments, CorpusConfig, Segment};
use crate::error::{Error, Result};
use crate::lm::{build_text_input, format_score, DecoderLm, ScorePair, Task, Vocabulary};
use crate::model::ModelConfig;
use crate::nn::{Init, Params};

/// Relative weights of the three pretraining tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub asr: u32,
    pub scoring_with_prompt: u32,
    pub scoring_without_prompt: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub mix: TaskMix,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            noise_std: 0.5,
            seed: 0,
            mix: TaskMix { asr: 2, scoring_with_prompt: 3, scoring_without_prompt: 1 },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("lm_pretrain needs batch_size >= 1, learning_rate > 0, noise_std >= 0".into()));
        }
        if self.mix.asr + self.mix.scoring_with_prompt + self.mix.scoring_without_prompt == 0 {
            return Err(Error::Config("lm_pretrain task mix is all zero".into()));
        }
        Ok(())
    }
}

/// First utterance index used for pretraining; far beyond any train/test split.
const INDEX_BASE: u64 = 1 << 40;

/// Majority symbol in each `hop`-sample window; silence maps to a space. Ties go to the
/// symbol that appears first in the window.
pub fn frame_labels(segments: &[Segment], hop: usize, n_frames: usize) -> Vec<char> {
    let per_sample: Vec<char> = segments.iter().flat_map(|s| std::iter::repeat_n(s.symbol.unwrap_or(' '), s.len)).collect();
    (0..n_frames)
        .map(|k| {
            let lo = (k * hop).min(per_sample.len());
            let hi = ((k + 1) * hop).min(per_sample.len());
            let mut counts: Vec<(char, usize)> = Vec::new();
            for &c in &per_sample[lo..hi] {
                match counts.iter_mut().find(|(x, _)| *x == c) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((c, 1)),
                }
            }
            let best = counts.iter().map(|&(_, n)| n).max().unwrap_or(0);
            counts.iter().find(|&&(_, n)| n == best).map_or(' ', |&(c, _)| c)
        })
        .collect()
}

fn example_loss(
    lm: &DecoderLm<f32>,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    model: &ModelConfig,
    corpus: &CorpusConfig,
    lexicon: &[String],
    index: u64,
    grads: &mut DecoderLm<f32>,
) -> Result<f32> {
    let spec = corpus.utterance_spec(lexicon, index);
    let (utt, segments) = render_with_segments(&spec, &corpus.inventory, corpus.sample_rate)?;
    let n_frames = model.speech_len(utt.samples.len())?;
    let label_ids = vocab.tokenize(&frame_labels(&segments, model.frame_hop(), n_frames).into_iter().collect::<String>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index));
    let mut prefix = lm.embed(&label_ids);
    let sd = cfg.noise_std as f32;
    prefix.data_mut().iter_mut().for_each(|v| *v += sd * rng.sample::<f32, _>(StandardNormal));

    let m = &cfg.mix;
    let pick = rng.random_range(0..m.asr + m.scoring_with_prompt + m.scoring_without_prompt);
    let (bundle, target) = if pick < m.asr {
        (build_text_input(vocab, Task::Asr, None)?, utt.spoken_text.clone())
    } else {
        let prompt = (pick < m.asr + m.scoring_with_prompt).then_some(utt.prompt_text.as_str());
        (build_text_input(vocab, Task::Scoring, prompt)?, format_score(ScorePair::new(utt.accuracy, utt.fluency)?))
    };
    let (loss, cache) = lm.forward_loss(&prefix, &bundle, &vocab.tokenize(&target)?)?;
    let d_prefix = lm.backward(&cache, Some(grads));
    for (r, &id) in label_ids.iter().enumerate() {
        for (g, &d) in grads.tok_emb.row_mut(id as usize).iter_mut().zip(d_prefix.row(r)) {
            *g += d;
        }
    }
    Ok(loss)
}

/// Trains a fresh LM on the text-side tasks. `progress(step, mean_loss)` is called after every step.
pub fn pretrain_lm(
    cfg: &PretrainConfig,
    model: &ModelConfig,
    corpus: &CorpusConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<DecoderLm<f32>> {
    cfg.validate()?;
    model.validate()?;
    corpus.validate()?;
    let vocab = Vocabulary::default();
    let lexicon = corpus.lexicon();
    let mut lm = DecoderLm::<f32>::new(&model.lm, &mut Init::new(mix_seed(cfg.seed, 3)))?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    for step in 0..cfg.steps {
        let base = INDEX_BASE + (step * cfg.batch_size) as u64;
        let parts: Vec<Result<(f32, DecoderLm<f32>)>> = (0..cfg.batch_size as u64)
            .into_par_iter()
            .map(|i| {
                let mut g = lm.clone();
                g.zero_();
                let l = example_loss(&lm, &vocab, cfg, model, corpus, &lexicon, base + i, &mut g)?;
                Ok((l, g))
            })
            .collect();
        let mut total = lm.clone();
        total.zero_();
        let mut loss = 0.0;
        for p in parts {
            let (l, g) = p?;
            loss += l as f64;
            total.accumulate(&g);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss"));
        }
        total.scale_(1.0 / cfg.batch_size as f32);
        clip_grad_norm(&mut total, cfg.grad_clip);
        opt.step(&mut lm, &total);
        progress(step, loss / cfg.batch_size as f64);
    }
    Ok(lm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_label_per_window() {
        let segs = [
            Segment { symbol: Some('k'), len: 50 },
            Segment { symbol: None, len: 20 },
            Segment { symbol: Some('a'), len: 30 },
        ];
        assert_eq!(frame_labels(&segs, 40, 3), vec!['k', ' ', 'a']);
        // window 2 holds 30 'a' samples and nothing else; window past the end is silence
        assert_eq!(frame_labels(&segs, 40, 4)[3], ' ');
    }
}
