use serde::{Deserialize, Serialize};

use super::prompt::PromptBundle;
use super::score::ScoreGrammar;
use super::vocab::{TokenId, Vocabulary, BOS, EOS, PAD, PREFIX_ASR, PREFIX_PA};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_rows, join, Block, BlockCache, BlockKv, Init, LayerNorm, Linear, LnCache, Params};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { n_layers: 4, model_dim: 128, n_heads: 4, ffn_dim: 512, max_seq_len: 512, vocab_size: Vocabulary::default().len() }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("lm model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads)));
        }
        if self.vocab_size != Vocabulary::default().len() {
            return Err(Error::Config(format!("lm vocab_size must be {}", Vocabulary::default().len())));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("lm max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// Causal transformer LM over `[speech embeddings ; text tokens ; BOS target EOS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLm<F> {
    pub config: LmConfig,
    pub tok_emb: Mat<F>,
    pub pos_emb: Mat<F>,
    pub blocks: Vec<Block<F>>,
    pub norm: LayerNorm<F>,
    pub head: Linear<F>,
}

pub struct LmCache<F> {
    speech_len: usize,
    ids: Vec<TokenId>,
    blocks: Vec<BlockCache<F>>,
    norm: LnCache<F>,
    head_in: Mat<F>,
    d_logits: Mat<F>,
}

impl<F> LmCache<F> {
    /// Total sequence length fed to the transformer.
    pub fn seq_len(&self) -> usize {
        self.speech_len + self.ids.len()
    }

    /// Token ids after the speech prefix: text, BOS, target, EOS.
    pub fn token_ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Loss gradient w.r.t. the logits; rows outside the target positions are zero.
    pub fn d_logits(&self) -> &Mat<F> {
        &self.d_logits
    }
}

/// Greedy decoding limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    /// Restrict output to the score grammar.
    pub constrained: bool,
}

/// Picks the highest-scoring allowed token; ties go to the lowest id.
fn argmax_allowed<F: Scalar>(logits: &[F], allowed: impl Iterator<Item = TokenId>) -> Option<TokenId> {
    let mut best: Option<(TokenId, F)> = None;
    for id in allowed {
        let v = logits[id as usize];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.map(|(id, _)| id)
}

/// Greedy decoding against any next-token source. `first` holds the logits after BOS and
/// `step(t)` feeds token `t` and returns the following logits. Returns the tokens before EOS.
pub fn greedy_decode<F: Scalar>(
    vocab: &Vocabulary,
    first: Vec<F>,
    mut step: impl FnMut(TokenId) -> Result<Vec<F>>,
    opts: DecodeOptions,
) -> Result<Vec<TokenId>> {
    let mut grammar = opts.constrained.then(ScoreGrammar::new);
    let mut logits = first;
    let mut out = Vec::new();
    let free: Vec<TokenId> = (0..vocab.len() as TokenId).filter(|&t| ![PAD, BOS, PREFIX_ASR, PREFIX_PA].contains(&t)).collect();
    while out.len() < opts.max_new_tokens {
        let next = match &grammar {
            Some(g) => argmax_allowed(&logits, g.allowed(vocab).into_iter()),
            None => argmax_allowed(&logits, free.iter().copied()),
        };
        let Some(next) = next else { break };
        if let Some(g) = grammar.as_mut() {
            g.advance(vocab, next);
        }
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() < opts.max_new_tokens {
            logits = step(next)?;
        }
    }
    Ok(out)
}

/// Incremental decoding state: one key/value cache per layer.
pub struct Session<'a, F: Scalar> {
    lm: &'a DecoderLm<F>,
    kv: Vec<BlockKv<F>>,
}

impl<F: Scalar> Session<'_, F> {
    pub fn len(&self) -> usize {
        self.kv.first().map_or(0, |k| k.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends raw input embeddings and returns the logits of the last position.
    pub fn feed(&mut self, mut x: Mat<F>) -> Result<Vec<F>> {
        let start = self.len();
        let end = start + x.rows();
        if end > self.lm.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: end, max: self.lm.config.max_seq_len });
        }
        for r in 0..x.rows() {
            let p = self.lm.pos_emb.row(start + r);
            for (v, &q) in x.row_mut(r).iter_mut().zip(p) {
                *v += q;
            }
        }
        for (b, kv) in self.lm.blocks.iter().zip(self.kv.iter_mut()) {
            x = b.forward_incremental(&x, kv);
        }
        let last = x.slice_rows(x.rows() - 1, x.rows());
        Ok(self.lm.head.forward(&self.lm.norm.apply(&last)).into_vec())
    }

    pub fn feed_tokens(&mut self, ids: &[TokenId]) -> Result<Vec<F>> {
        let x = self.lm.embed(ids);
        self.feed(x)
    }
}

impl<F: Scalar> DecoderLm<F> {
    pub fn new(config: &LmConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        Ok(Self {
            config: config.clone(),
            tok_emb: init.unit(config.vocab_size, d),
            pos_emb: init.unit(config.max_seq_len, d),
            blocks: (0..config.n_layers).map(|_| Block::new(init, d, config.n_heads, config.ffn_dim)).collect(),
            norm: LayerNorm::new(d),
            head: Linear::new(init, d, config.vocab_size),
        })
    }

    pub fn embed(&self, ids: &[TokenId]) -> Mat<F> {
        let d = self.config.model_dim;
        let mut m = Mat::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.tok_emb.row(id as usize));
        }
        m
    }

    fn check_speech(&self, speech: &Mat<F>) -> Result<()> {
        if speech.cols() != self.config.model_dim {
            return Err(Error::ShapeMismatch(format!("lm expects {}-d speech embeddings, got {}", self.config.model_dim, speech.cols())));
        }
        if !speech.is_finite() {
            return Err(Error::NonFinite("speech embeddings"));
        }
        Ok(())
    }

    /// Teacher-forced loss: mean cross-entropy of the target tokens and EOS, each predicted
    /// from the previous position. The sequence length is `Ts + Tt + Ttarget + 2`.
    pub fn forward_loss(&self, speech: &Mat<F>, bundle: &PromptBundle, target: &[TokenId]) -> Result<(F, LmCache<F>)> {
        self.check_speech(speech)?;
        let ts = speech.rows();
        let tt = bundle.token_ids.len();
        let mut ids = bundle.token_ids.clone();
        ids.push(BOS);
        ids.extend_from_slice(target);
        ids.push(EOS);
        let len = ts + ids.len();
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len, max: self.config.max_seq_len });
        }
        let mut x = Mat::vstack(&[speech, &self.embed(&ids)]);
        x.add_inplace(&self.pos_emb.slice_rows(0, len));
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, true);
            caches.push(c);
            x = y;
        }
        let (head_in, norm) = self.norm.forward(&x);
        let logits = self.head.forward(&head_in);
        let picks: Vec<(usize, usize)> = (0..=target.len())
            .map(|j| (ts + tt + j, *target.get(j).unwrap_or(&EOS) as usize))
            .collect();
        let (loss, d_logits) = cross_entropy_rows(&logits, &picks);
        Ok((loss, LmCache { speech_len: ts, ids, blocks: caches, norm, head_in, d_logits }))
    }

    /// Backpropagates the cached loss. Parameter gradients go to `grads` when given; the
    /// return value is the gradient w.r.t. the speech embeddings.
    pub fn backward(&self, cache: &LmCache<F>, mut grads: Option<&mut Self>) -> Mat<F> {
        let mut dx = self.head.backward(&cache.head_in, &cache.d_logits, grads.as_deref_mut().map(|g| &mut g.head));
        dx = self.norm.backward(&cache.norm, &dx, grads.as_deref_mut().map(|g| &mut g.norm));
        for (i, b) in self.blocks.iter().enumerate().rev() {
            dx = b.backward(&cache.blocks[i], &dx, grads.as_deref_mut().map(|g| &mut g.blocks[i]));
        }
        if let Some(g) = grads {
            for r in 0..dx.rows() {
                for (a, &v) in g.pos_emb.row_mut(r).iter_mut().zip(dx.row(r)) {
                    *a += v;
                }
            }
            for (i, &id) in cache.ids.iter().enumerate() {
                for (a, &v) in g.tok_emb.row_mut(id as usize).iter_mut().zip(dx.row(cache.speech_len + i)) {
                    *a += v;
                }
            }
        }
        dx.slice_rows(0, cache.speech_len)
    }

    pub fn session(&self) -> Session<'_, F> {
        Session { lm: self, kv: (0..self.blocks.len()).map(|_| BlockKv::default()).collect() }
    }

    /// Greedy generation after `[speech ; text ; BOS]`, using cached keys and values.
    pub fn generate(&self, vocab: &Vocabulary, speech: &Mat<F>, bundle: &PromptBundle, opts: DecodeOptions) -> Result<Vec<TokenId>> {
        self.check_speech(speech)?;
        let mut ids = bundle.token_ids.clone();
        ids.push(BOS);
        let prefix_len = speech.rows() + ids.len();
        if prefix_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: prefix_len, max: self.config.max_seq_len });
        }
        let budget = opts.max_new_tokens.min(self.config.max_seq_len - prefix_len + 1);
        let mut s = self.session();
        let first = s.feed(Mat::vstack(&[speech, &self.embed(&ids)]))?;
        greedy_decode(vocab, first, |t| s.feed_tokens(&[t]), DecodeOptions { max_new_tokens: budget, ..opts })
    }

    /// Full-sequence logits, `[T x V]`, without caching. Used to check incremental decoding.
    pub fn logits(&self, speech: &Mat<F>, ids: &[TokenId]) -> Result<Mat<F>> {
        self.check_speech(speech)?;
        let len = speech.rows() + ids.len();
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len, max: self.config.max_seq_len });
        }
        let mut x = Mat::vstack(&[speech, &self.embed(ids)]);
        x.add_inplace(&self.pos_emb.slice_rows(0, len));
        for b in &self.blocks {
            x = b.forward(&x, true).0;
        }
        Ok(self.head.forward(&self.norm.apply(&x)))
    }
}

impl<F: Scalar> Params<F> for DecoderLm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        f(join(prefix, "tok_emb"), &self.tok_emb);
        f(join(prefix, "pos_emb"), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        f(join(prefix, "tok_emb"), &mut self.tok_emb);
        f(join(prefix, "pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{build_text_input, format_score, parse_score, ScorePair, Task};

    fn tiny() -> DecoderLm<f64> {
        let cfg = LmConfig { n_layers: 1, model_dim: 8, n_heads: 2, ffn_dim: 16, max_seq_len: 64, ..Default::default() };
        DecoderLm::new(&cfg, &mut Init::new(3)).unwrap()
    }

    #[test]
    fn hand_set_logits_decode_exactly() {
        let v = Vocabulary::default();
        let want = "accuracy:9 fluency:7";
        let ids = v.tokenize(want).unwrap();
        let logits_for = |i: usize| {
            let mut l = vec![0.0f64; v.len()];
            let t = ids.get(i).copied().unwrap_or(EOS);
            l[t as usize] = 5.0;
            l
        };
        let mut i = 0;
        let out = greedy_decode(&v, logits_for(0), |_| { i += 1; Ok(logits_for(i)) }, DecodeOptions { max_new_tokens: 30, constrained: true }).unwrap();
        assert_eq!(v.detokenize(&out), want);
        assert_eq!(parse_score(&v.detokenize(&out)).unwrap(), ScorePair { accuracy: 9, fluency: 7 });
    }

    #[test]
    fn incremental_matches_full_forward() {
        let lm = tiny();
        let speech = Mat::from_fn(5, 8, |r, c| ((r * 8 + c) as f64 * 0.37).sin());
        let ids = [PREFIX_ASR, BOS, 7, 9, 11];
        let full = lm.logits(&speech, &ids).unwrap();
        let mut s = lm.session();
        let mut last = s.feed(Mat::vstack(&[&speech, &lm.embed(&ids[..2])])).unwrap();
        for (k, &t) in ids[2..].iter().enumerate() {
            let row = full.row(speech.rows() + 1 + k);
            for (a, b) in last.iter().zip(row) {
                assert!((a - b).abs() < 1e-9);
            }
            last = s.feed_tokens(&[t]).unwrap();
        }
    }

    #[test]
    fn too_long_sequence_is_an_error() {
        let lm = tiny();
        let v = Vocabulary::default();
        let b = build_text_input(&v, Task::Scoring, Some("ka lo mi")).unwrap();
        let speech = Mat::zeros(30, 8);
        let target = v.tokenize(&format_score(ScorePair { accuracy: 1, fluency: 2 })).unwrap();
        assert!(matches!(lm.forward_loss(&speech, &b, &target), Err(Error::SequenceTooLong { .. })));
        let bad = Mat::zeros(3, 7);
        assert!(matches!(lm.forward_loss(&bad, &b, &target), Err(Error::ShapeMismatch(_))));
    }
}
