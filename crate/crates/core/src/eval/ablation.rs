use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_asr, pcc, score_rows, write_asr_rows, write_score_rows, EvalConfig, ScoreRow};
use crate::corpus::Utterance;
use crate::error::{Error, MetricError, Result};
use crate::lm::DecoderLm;
use crate::model::ModelConfig;
use crate::train::{checkpoint, init_from_checkpoint, loss_log_csv, train_stage, LossRecord, ModelState, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationArm {
    pub label: &'static str,
    pub factors: &'static str,
    pub asr_training: bool,
    pub prompt_text: bool,
}

pub const ARMS: [AblationArm; 4] = [
    AblationArm { label: "a", factors: "ASR training + Prompt text", asr_training: true, prompt_text: true },
    AblationArm { label: "b", factors: "ASR training only", asr_training: true, prompt_text: false },
    AblationArm { label: "c", factors: "Prompt text only", asr_training: false, prompt_text: true },
    AblationArm { label: "d", factors: "-", asr_training: false, prompt_text: false },
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train_stage1: TrainConfig,
    pub train_stage2: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    /// `None` when the arm's predictions for that score are constant (or fewer than two parse).
    pub pcc_fluency: Option<f64>,
    pub pcc_accuracy: Option<f64>,
    pub parse_failure_rate: f64,
    /// Digest of the stage-1 checkpoint this arm started from, if any.
    pub init_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub factors: String,
    /// Means over seeds, counting an undefined PCC as 0.
    pub mean_pcc_fluency: f64,
    pub mean_pcc_accuracy: f64,
    /// Seeds where at least one of the two PCCs was undefined.
    pub undefined_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub stage1_wer: Vec<f64>,
    pub runs: Vec<ArmResult>,
    pub arms: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn arm(&self, label: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == label)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<5}{:<30}{:>10}{:>10}\n", "", "Factors", "Fluency", "Accuracy");
        for a in &self.arms {
            let mark = if a.undefined_runs > 0 { " *" } else { "" };
            s.push_str(&format!(
                "{:<5}{:<30}{:>10.3}{:>10.3}{mark}\n",
                format!("({})", a.arm),
                a.factors,
                a.mean_pcc_fluency,
                a.mean_pcc_accuracy
            ));
        }
        s.push_str(&format!("means over seeds {:?}\n", self.seeds));
        if self.arms.iter().any(|a| a.undefined_runs > 0) {
            s.push_str("* constant predictions in some seeds; their PCC counts as 0\n");
        }
        s
    }
}

fn save_run(dir: Option<&Path>, name: &str, state: &ModelState, log: &[LossRecord]) -> Result<()> {
    if let Some(d) = dir {
        let d = d.join(name);
        state.save(&d.join("model.ckpt"))?;
        checkpoint::write_atomic(&d.join("loss.csv"), loss_log_csv(log).as_bytes())?;
    }
    Ok(())
}

fn save_json<T: Serialize>(dir: Option<&Path>, name: &str, value: &T) -> Result<()> {
    if let Some(d) = dir {
        checkpoint::write_atomic(&d.join(name), &serde_json::to_vec_pretty(value)?)?;
    }
    Ok(())
}

/// Per-arm scores for the ablation table. Unlike [`aggregate_scoring`](super::aggregate_scoring),
/// a PCC that is undefined because one side is constant becomes `None` instead of an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmScores {
    pub pcc_accuracy: Option<f64>,
    pub pcc_fluency: Option<f64>,
    pub parse_failure_rate: f64,
    pub n_valid: usize,
    pub n_utterances: usize,
}

pub fn arm_scores(rows: &[ScoreRow]) -> Result<ArmScores> {
    if rows.is_empty() {
        return Err(MetricError::TooFewPairs(0).into());
    }
    let valid: Vec<&ScoreRow> = rows.iter().filter(|r| r.pred_accuracy.is_some() && r.pred_fluency.is_some()).collect();
    let field = |pred: fn(&ScoreRow) -> Option<u8>, label: fn(&ScoreRow) -> u8| -> Result<Option<f64>> {
        let xs: Vec<f64> = valid.iter().map(|r| pred(r).unwrap() as f64).collect();
        let ys: Vec<f64> = valid.iter().map(|r| label(r) as f64).collect();
        match pcc(&xs, &ys) {
            Ok(v) => Ok(Some(v)),
            Err(MetricError::ZeroVariance(_) | MetricError::TooFewPairs(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    };
    Ok(ArmScores {
        pcc_accuracy: field(|r| r.pred_accuracy, |r| r.label_accuracy)?,
        pcc_fluency: field(|r| r.pred_fluency, |r| r.label_fluency)?,
        parse_failure_rate: (rows.len() - valid.len()) as f64 / rows.len() as f64,
        n_valid: valid.len(),
        n_utterances: rows.len(),
    })
}

/// Trains and scores the four arms for every seed. Arms (a) and (b) continue from one shared
/// stage-1 state per seed; (c) and (d) start stage 2 from a fresh encoder and adapter.
/// Each training run gets its own directory under `out_dir` when given.
pub fn run_ablation(
    cfg: &AblationConfig,
    seeds: &[u64],
    train: &[Utterance],
    test: &[Utterance],
    lm: &DecoderLm<f32>,
    lm_origin: &str,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    let mut stage1_wer = Vec::new();
    for &seed in seeds {
        let seed_dir = out_dir.map(|d| d.join(format!("seed-{seed}")));
        let fresh = ModelState::fresh(&cfg.model, seed, lm.clone(), lm_origin)?;
        let s1cfg = TrainConfig { seed, ..cfg.train_stage1.clone() };
        let (s1, log1) = train_stage(&s1cfg, train, &[], fresh.clone())?;
        let (asr, asr_rows) = evaluate_asr(&s1.model, test, &cfg.eval)?;
        progress(&format!("seed {seed}: stage 1 done, WER {:.4}", asr.wer));
        save_run(seed_dir.as_deref(), "stage1", &s1, &log1)?;
        if let Some(d) = &seed_dir {
            write_asr_rows(&d.join("stage1").join("asr.csv"), &asr_rows)?;
        }
        stage1_wer.push(asr.wer);
        let from_s1 = init_from_checkpoint(&s1)?;
        for arm in ARMS {
            let init = if arm.asr_training { from_s1.clone() } else { fresh.clone() };
            let init_sha256 = init.init_from.as_ref().map(|r| r.sha256.clone());
            let s2cfg = TrainConfig { seed, use_prompt_text: arm.prompt_text, ..cfg.train_stage2.clone() };
            let (s2, log2) = train_stage(&s2cfg, train, &[], init)?;
            let name = format!("arm-{}", arm.label);
            save_run(seed_dir.as_deref(), &name, &s2, &log2)?;
            let rows = score_rows(&s2.model, test, arm.prompt_text, &cfg.eval)?;
            if let Some(d) = &seed_dir {
                write_score_rows(&d.join(&name).join("scores.csv"), &rows)?;
            }
            let rep = arm_scores(&rows)?;
            let show = |p: Option<f64>| p.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            progress(&format!(
                "seed {seed}: arm ({}) accuracy PCC {}, fluency PCC {}",
                arm.label,
                show(rep.pcc_accuracy),
                show(rep.pcc_fluency)
            ));
            save_json(seed_dir.as_ref().map(|d| d.join(&name)).as_deref(), "report.json", &rep)?;
            runs.push(ArmResult {
                arm: arm.label.to_string(),
                seed,
                pcc_fluency: rep.pcc_fluency,
                pcc_accuracy: rep.pcc_accuracy,
                parse_failure_rate: rep.parse_failure_rate,
                init_sha256,
            });
        }
    }
    let arms = ARMS
        .iter()
        .map(|a| {
            let rs: Vec<&ArmResult> = runs.iter().filter(|r| r.arm == a.label).collect();
            let n = rs.len() as f64;
            ArmSummary {
                arm: a.label.to_string(),
                factors: a.factors.to_string(),
                mean_pcc_fluency: rs.iter().map(|r| r.pcc_fluency.unwrap_or(0.0)).sum::<f64>() / n,
                mean_pcc_accuracy: rs.iter().map(|r| r.pcc_accuracy.unwrap_or(0.0)).sum::<f64>() / n,
                undefined_runs: rs.iter().filter(|r| r.pcc_fluency.is_none() || r.pcc_accuracy.is_none()).count(),
            }
        })
        .collect();
    let report = AblationReport { seeds: seeds.to_vec(), stage1_wer, runs, arms };
    save_json(out_dir, "ablation.json", &report)?;
    if let Some(d) = out_dir {
        checkpoint::write_atomic(&d.join("ablation.txt"), report.to_table().as_bytes())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pred: Option<(u8, u8)>, label: (u8, u8)) -> ScoreRow {
        ScoreRow {
            id: String::new(),
            prediction: String::new(),
            pred_accuracy: pred.map(|p| p.0),
            pred_fluency: pred.map(|p| p.1),
            label_accuracy: label.0,
            label_fluency: label.1,
        }
    }

    #[test]
    fn constant_predictions_give_undefined_pcc() {
        let rows = [row(Some((9, 3)), (9, 2)), row(Some((9, 7)), (4, 8)), row(Some((9, 5)), (6, 5)), row(None, (1, 1))];
        let s = arm_scores(&rows).unwrap();
        assert_eq!(s.pcc_accuracy, None);
        assert!((s.pcc_fluency.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!((s.n_valid, s.n_utterances, s.parse_failure_rate), (3, 4, 0.25));

        let one = arm_scores(&[row(Some((3, 3)), (2, 2)), row(None, (5, 5))]).unwrap();
        assert_eq!((one.pcc_accuracy, one.pcc_fluency), (None, None));
        assert!(arm_scores(&[]).is_err());
    }

    #[test]
    fn table_marks_arms_with_undefined_runs() {
        let summary = |arm: &str, undefined_runs| ArmSummary {
            arm: arm.into(),
            factors: "-".into(),
            mean_pcc_fluency: 0.9,
            mean_pcc_accuracy: 0.1,
            undefined_runs,
        };
        let mut rep = AblationReport { seeds: vec![1], stage1_wer: vec![0.1], runs: vec![], arms: vec![summary("a", 0), summary("d", 1)] };
        let t = rep.to_table();
        let rows: Vec<&str> = t.lines().filter(|l| l.starts_with('(')).collect();
        assert!(!rows[0].ends_with('*') && rows[1].ends_with('*'), "{t}");
        assert!(t.contains("counts as 0"));
        rep.arms[1].undefined_runs = 0;
        assert!(!rep.to_table().contains('*'));
    }
}
