use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, PREFIX_ASR, PREFIX_PA};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Scoring,
}

/// Text side of the LM input: task prefix plus, for scoring, the optional prompt sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptBundle {
    pub task: Task,
    pub prompt_text: Option<String>,
    pub token_ids: Vec<TokenId>,
}

pub const PROMPT_LEAD: &str = "the prompt text is ";

/// Builds the text input for `task`.
///
/// * ASR: `[<transcript>]`; a prompt is an error.
/// * Scoring with `Some(prompt)`: `[<Pronunciation Assessment>] + "the prompt text is " + prompt`;
///   an empty prompt is an error.
/// * Scoring with `None`: prompt conditioning disabled, `[<Pronunciation Assessment>]` only.
pub fn build_text_input(vocab: &Vocabulary, task: Task, prompt_text: Option<&str>) -> Result<PromptBundle> {
    let token_ids = match (task, prompt_text) {
        (Task::Asr, None) => vec![PREFIX_ASR],
        (Task::Asr, Some(_)) => return Err(Error::Prompt("ASR input takes no prompt text".into())),
        (Task::Scoring, None) => vec![PREFIX_PA],
        (Task::Scoring, Some(p)) => {
            if p.trim().is_empty() {
                return Err(Error::Prompt("scoring with prompt conditioning needs a non-empty prompt".into()));
            }
            let mut ids = vec![PREFIX_PA];
            ids.extend(vocab.tokenize(&format!("{PROMPT_LEAD}{p}"))?);
            ids
        }
    };
    Ok(PromptBundle { task, prompt_text: prompt_text.map(str::to_string), token_ids })
}
