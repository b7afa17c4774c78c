//! Metrics, the ASR and scoring evaluation pipelines, and the four-arm ablation.

mod ablation;
mod metrics;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{arm_scores, run_ablation, AblationArm, AblationConfig, AblationReport, ArmResult, ArmScores, ArmSummary, ARMS};
pub use metrics::{normalize_text, pcc, wer, word_edits};

use crate::align::EditCounts;
use crate::corpus::Utterance;
use crate::error::{Error, MetricError, Result};
use crate::lm::{build_text_input, parse_score, DecodeOptions, ScoreGrammar, Task, Vocabulary};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Restrict scoring output to the score grammar.
    pub constrained: bool,
    pub asr_max_new_tokens: usize,
    pub score_max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { constrained: true, asr_max_new_tokens: 64, score_max_new_tokens: ScoreGrammar::max_len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    pub wer: f64,
    pub n_utterances: usize,
    pub reference_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub reference_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringReport {
    pub pcc_accuracy: f64,
    pub pcc_fluency: f64,
    pub parse_failure_rate: f64,
    pub n_valid: usize,
    pub n_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub prediction: String,
    pub pred_accuracy: Option<u8>,
    pub pred_fluency: Option<u8>,
    pub label_accuracy: u8,
    pub label_fluency: u8,
}

/// Corpus WER from per-utterance rows: total edits over total reference words.
pub fn aggregate_asr(rows: &[AsrRow]) -> Result<AsrReport> {
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut e = EditCounts::default();
    let mut words = 0;
    for r in rows {
        e += EditCounts { substitutions: r.substitutions, deletions: r.deletions, insertions: r.insertions };
        words += r.reference_words;
    }
    Ok(AsrReport {
        wer: e.distance() as f64 / words as f64,
        n_utterances: rows.len(),
        reference_words: words,
        substitutions: e.substitutions,
        deletions: e.deletions,
        insertions: e.insertions,
    })
}

/// ASR evaluation with an arbitrary transcriber. Rows come back in input order.
pub fn evaluate_asr_with(data: &[Utterance], transcribe: impl Fn(&Utterance) -> Result<String> + Sync) -> Result<(AsrReport, Vec<AsrRow>)> {
    let rows: Vec<AsrRow> = data
        .par_iter()
        .map(|u| {
            let hyp = transcribe(u)?;
            let (e, n) = word_edits(&u.spoken_text, &hyp)?;
            Ok(AsrRow {
                id: u.id.clone(),
                reference: u.spoken_text.clone(),
                hypothesis: hyp,
                reference_words: n,
                substitutions: e.substitutions,
                deletions: e.deletions,
                insertions: e.insertions,
            })
        })
        .collect::<Result<_>>()?;
    Ok((aggregate_asr(&rows)?, rows))
}

/// Greedy, unconstrained transcription of every utterance behind the `<transcript>` prefix.
pub fn evaluate_asr(model: &Model<f32>, data: &[Utterance], cfg: &EvalConfig) -> Result<(AsrReport, Vec<AsrRow>)> {
    let vocab = Vocabulary::default();
    let bundle = build_text_input(&vocab, Task::Asr, None)?;
    let opts = DecodeOptions { max_new_tokens: cfg.asr_max_new_tokens, constrained: false };
    evaluate_asr_with(data, |u| model.generate(&vocab, &u.samples, u.sample_rate, &bundle, opts))
}

/// PCCs over the parseable rows; unparseable rows only count toward the failure rate.
pub fn aggregate_scoring(rows: &[ScoreRow]) -> Result<ScoringReport> {
    let valid: Vec<&ScoreRow> = rows.iter().filter(|r| r.pred_accuracy.is_some() && r.pred_fluency.is_some()).collect();
    if valid.len() < 2 {
        return Err(MetricError::TooFewPairs(valid.len()).into());
    }
    let col = |f: &dyn Fn(&ScoreRow) -> u8| valid.iter().map(|r| f(r) as f64).collect::<Vec<f64>>();
    Ok(ScoringReport {
        pcc_accuracy: pcc(&col(&|r| r.pred_accuracy.unwrap()), &col(&|r| r.label_accuracy))?,
        pcc_fluency: pcc(&col(&|r| r.pred_fluency.unwrap()), &col(&|r| r.label_fluency))?,
        parse_failure_rate: (rows.len() - valid.len()) as f64 / rows.len() as f64,
        n_valid: valid.len(),
        n_utterances: rows.len(),
    })
}

/// Per-utterance predictions, parsed where possible, without aggregating.
pub fn score_rows_with(data: &[Utterance], predict: impl Fn(&Utterance) -> Result<String> + Sync) -> Result<Vec<ScoreRow>> {
    data
        .par_iter()
        .map(|u| {
            let prediction = predict(u)?;
            let parsed = parse_score(&prediction).ok();
            Ok(ScoreRow {
                id: u.id.clone(),
                pred_accuracy: parsed.map(|p| p.accuracy),
                pred_fluency: parsed.map(|p| p.fluency),
                prediction,
                label_accuracy: u.accuracy,
                label_fluency: u.fluency,
            })
        })
        .collect()
}

pub fn evaluate_scoring_with(data: &[Utterance], predict: impl Fn(&Utterance) -> Result<String> + Sync) -> Result<(ScoringReport, Vec<ScoreRow>)> {
    let rows = score_rows_with(data, predict)?;
    Ok((aggregate_scoring(&rows)?, rows))
}

/// Greedy score generation behind `<Pronunciation Assessment>`, with or without the prompt sentence.
pub fn score_rows(model: &Model<f32>, data: &[Utterance], use_prompt_text: bool, cfg: &EvalConfig) -> Result<Vec<ScoreRow>> {
    let vocab = Vocabulary::default();
    let opts = DecodeOptions { max_new_tokens: cfg.score_max_new_tokens, constrained: cfg.constrained };
    score_rows_with(data, |u| {
        let bundle = build_text_input(&vocab, Task::Scoring, use_prompt_text.then_some(u.prompt_text.as_str()))?;
        model.generate(&vocab, &u.samples, u.sample_rate, &bundle, opts)
    })
}

pub fn evaluate_scoring(
    model: &Model<f32>,
    data: &[Utterance],
    use_prompt_text: bool,
    cfg: &EvalConfig,
) -> Result<(ScoringReport, Vec<ScoreRow>)> {
    let rows = score_rows(model, data, use_prompt_text, cfg)?;
    Ok((aggregate_scoring(&rows)?, rows))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::io(path, e.into()))).collect()
}

pub fn write_asr_rows(path: &Path, rows: &[AsrRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_asr_rows(path: &Path) -> Result<Vec<AsrRow>> {
    read_csv(path)
}

pub fn write_score_rows(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_score_rows(path: &Path) -> Result<Vec<ScoreRow>> {
    read_csv(path)
}

impl AsrReport {
    pub fn to_table(&self) -> String {
        format!(
            "metric           value\nWER              {:.4}\nutterances       {}\nreference words  {}\nsubstitutions    {}\ndeletions        {}\ninsertions       {}\n",
            self.wer, self.n_utterances, self.reference_words, self.substitutions, self.deletions, self.insertions
        )
    }
}

impl ScoringReport {
    pub fn to_table(&self) -> String {
        format!(
            "metric              value\naccuracy PCC        {:.4}\nfluency PCC         {:.4}\nparse failure rate  {:.4}\nvalid predictions   {}/{}\n",
            self.pcc_accuracy, self.pcc_fluency, self.parse_failure_rate, self.n_valid, self.n_utterances
        )
    }
}
