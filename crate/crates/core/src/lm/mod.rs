//! Decoder-only language model with speech embeddings as a prefix, its character vocabulary,
//! prompt construction and the score text format.

mod model;
mod prompt;
mod score;
mod vocab;

pub use model::{greedy_decode, DecodeOptions, DecoderLm, LmCache, LmConfig, Session};
pub use prompt::{build_text_input, PromptBundle, Task, PROMPT_LEAD};
pub use score::{format_score, parse_score, ScoreGrammar, ScorePair, MAX_SCORE};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, PREFIX_ASR, PREFIX_PA};
