//! Text form of a score pair, `accuracy:A fluency:F`, and a character-level grammar for it.

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, EOS};
use crate::error::{Error, Result, ScoreParseError};

pub const MAX_SCORE: u8 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScorePair {
    pub accuracy: u8,
    pub fluency: u8,
}

impl ScorePair {
    pub fn new(accuracy: u8, fluency: u8) -> Result<Self> {
        for (field, v) in [("accuracy", accuracy), ("fluency", fluency)] {
            if v > MAX_SCORE {
                return Err(ScoreParseError::OutOfRange { field, value: v as i64 }.into());
            }
        }
        Ok(Self { accuracy, fluency })
    }
}

pub fn format_score(s: ScorePair) -> String {
    format!("accuracy:{} fluency:{}", s.accuracy, s.fluency)
}

fn parse_field(field: &'static str, raw: &str) -> std::result::Result<u8, ScoreParseError> {
    let digits = raw.strip_prefix('-').unwrap_or(raw);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ScoreParseError::NotInteger(raw.to_string()));
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return Err(ScoreParseError::Malformed(format!("{field} value {raw:?} has a leading zero")));
    }
    let value: i64 = raw.parse().unwrap_or(if raw.starts_with('-') { i64::MIN } else { i64::MAX });
    if !(0..=MAX_SCORE as i64).contains(&value) {
        return Err(ScoreParseError::OutOfRange { field, value });
    }
    Ok(value as u8)
}

/// Exact inverse of [`format_score`]; anything else is rejected.
pub fn parse_score(text: &str) -> std::result::Result<ScorePair, ScoreParseError> {
    let a = text.find("accuracy:").ok_or(ScoreParseError::MissingField("accuracy"))?;
    let f = text.find("fluency:").ok_or(ScoreParseError::MissingField("fluency"))?;
    if f < a {
        return Err(ScoreParseError::WrongOrder);
    }
    let rest = text
        .strip_prefix("accuracy:")
        .ok_or_else(|| ScoreParseError::Malformed(format!("unexpected text before accuracy field in {text:?}")))?;
    let (acc, flu) = rest
        .split_once(" fluency:")
        .ok_or_else(|| ScoreParseError::Malformed(format!("fields must be separated by one space in {text:?}")))?;
    Ok(ScorePair { accuracy: parse_field("accuracy", acc)?, fluency: parse_field("fluency", flu)? })
}

impl std::str::FromStr for ScorePair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(parse_score(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Lit(&'static str),
    Num,
}

const PARTS: [Part; 4] = [Part::Lit("accuracy:"), Part::Num, Part::Lit(" fluency:"), Part::Num];

/// Left-to-right automaton accepting exactly the strings `format_score` can produce, then EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoreGrammar {
    part: usize,
    /// Characters consumed within the current part.
    offset: usize,
    /// First digit of the current number, if one was read.
    first_digit: Option<char>,
    done: bool,
}

impl Default for ScoreGrammar {
    fn default() -> Self {
        Self::new()
    }
}

impl ScoreGrammar {
    pub fn new() -> Self {
        Self { part: 0, offset: 0, first_digit: None, done: false }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Longest accepted output in tokens, EOS included.
    pub fn max_len() -> usize {
        format_score(ScorePair { accuracy: MAX_SCORE, fluency: MAX_SCORE }).len() + 1
    }

    /// What may follow a completed number: the next literal's first char, or EOS after the last part.
    fn after_number(&self) -> Option<char> {
        match PARTS.get(self.part + 1) {
            Some(Part::Lit(s)) => s.chars().next(),
            _ => None,
        }
    }

    fn allowed_chars(&self) -> (Vec<char>, bool) {
        if self.done {
            return (Vec::new(), false);
        }
        match PARTS[self.part] {
            Part::Lit(s) => (vec![s.as_bytes()[self.offset] as char], false),
            Part::Num => match self.first_digit {
                None => (('0'..='9').collect(), false),
                Some(d) if self.offset == 1 => {
                    let mut v: Vec<char> = self.after_number().into_iter().collect();
                    if d == '1' {
                        v.push('0');
                    }
                    (v, self.after_number().is_none())
                }
                Some(_) => (self.after_number().into_iter().collect(), self.after_number().is_none()),
            },
        }
    }

    /// Token ids allowed next.
    pub fn allowed(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let (chars, eos) = self.allowed_chars();
        let mut ids: Vec<TokenId> = chars.iter().filter_map(|&c| vocab.char_id(c)).collect();
        if eos {
            ids.push(EOS);
        }
        ids.sort_unstable();
        ids
    }

    /// Consumes one token; returns false (and leaves the state unchanged) if it is not allowed.
    pub fn advance(&mut self, vocab: &Vocabulary, id: TokenId) -> bool {
        if !self.allowed(vocab).contains(&id) {
            return false;
        }
        if id == EOS {
            self.done = true;
            return true;
        }
        let c = vocab.token(id).chars().next().expect("character token");
        match PARTS[self.part] {
            Part::Lit(s) => {
                self.offset += 1;
                if self.offset == s.len() {
                    self.part += 1;
                    self.offset = 0;
                }
            }
            Part::Num => {
                if self.first_digit.is_none() {
                    self.first_digit = Some(c);
                    self.offset = 1;
                } else if self.offset == 1 && c == '0' && self.first_digit == Some('1') {
                    self.offset = 2;
                } else {
                    // c starts the next literal
                    self.part += 1;
                    self.offset = 1;
                    self.first_digit = None;
                    if let Part::Lit(s) = PARTS[self.part] {
                        if s.len() == 1 {
                            self.part += 1;
                            self.offset = 0;
                        }
                    }
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_pairs() {
        for a in 0..=10 {
            for f in 0..=10 {
                let p = ScorePair::new(a, f).unwrap();
                assert_eq!(parse_score(&format_score(p)).unwrap(), p);
            }
        }
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(parse_score("accuracy:8"), Err(ScoreParseError::MissingField("fluency"))));
        assert!(matches!(parse_score("fluency:7 accuracy:8"), Err(ScoreParseError::WrongOrder)));
        assert!(matches!(parse_score("accuracy:x fluency:7"), Err(ScoreParseError::NotInteger(_))));
        assert!(matches!(parse_score("accuracy:11 fluency:7"), Err(ScoreParseError::OutOfRange { field: "accuracy", value: 11 })));
        assert!(matches!(parse_score("accuracy:-1 fluency:7"), Err(ScoreParseError::OutOfRange { value: -1, .. })));
        assert!(parse_score("accuracy:8  fluency:7").is_err());
        assert!(parse_score(" accuracy:8 fluency:7").is_err());
        assert!(parse_score("accuracy:8 fluency:7 ").is_err());
        assert!(parse_score("accuracy:08 fluency:7").is_err());
    }

    fn accepts(s: &str) -> bool {
        let v = Vocabulary::default();
        let mut g = ScoreGrammar::new();
        s.chars().all(|c| g.advance(&v, v.char_id(c).unwrap())) && g.advance(&v, EOS) && g.is_done()
    }

    #[test]
    fn grammar_accepts_exactly_the_formatted_strings() {
        for a in 0..=10 {
            for f in 0..=10 {
                assert!(accepts(&format_score(ScorePair { accuracy: a, fluency: f })));
            }
        }
        for bad in ["accuracy:11 fluency:1", "accuracy:1 fluency:", "accuracy:01 fluency:1", "accuracy:5 fluency:100"] {
            assert!(!accepts(bad), "{bad}");
        }
        assert_eq!(ScoreGrammar::max_len(), 23);
    }
}
