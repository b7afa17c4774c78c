use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PREFIX_ASR: TokenId = 3;
pub const PREFIX_PA: TokenId = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<transcript>", "<Pronunciation Assessment>"];
const CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 :";

/// Character-level vocabulary: five special tokens followed by `a-z`, `0-9`, space and colon.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(CHARS.chars().map(String::from));
        Self { tokens }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    /// Id of a single character, if it is in the alphabet.
    pub fn char_id(&self, c: char) -> Option<TokenId> {
        CHARS.chars().position(|x| x == c).map(|p| (p + SPECIALS.len()) as TokenId)
    }

    /// Maps a special-token literal to its id. Prefix lookup ignores case, so the
    /// lowercase spelling `<pronunciation assessment>` resolves to the same token.
    pub fn special_id(&self, literal: &str) -> Option<TokenId> {
        SPECIALS.iter().position(|s| s.eq_ignore_ascii_case(literal)).map(|p| p as TokenId)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars().map(|c| self.char_id(c).ok_or(Error::UnknownChar(c))).collect()
    }

    /// Concatenates character tokens; special tokens are dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter().filter(|&&id| !self.is_special(id)).map(|&id| self.token(id)).collect()
    }

    /// Human-readable rendering: specials as their literal, separated from following text by a space.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            out.push_str(self.token(id));
            if self.is_special(id) && ids.get(i + 1).is_some_and(|&n| !self.is_special(n)) {
                out.push(' ');
            }
        }
        out
    }

    /// Checks a vocabulary read back from a checkpoint against the built-in one.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let v = Self { tokens };
        if v != Self::default() {
            return Err(Error::Checkpoint("vocabulary differs from the built-in character vocabulary".into()));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
