use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alignfree::config::RunConfig;
use alignfree::corpus::{generate_corpus, load_manifest, manifest_path, read_audio, Split, Utterance};
use alignfree::eval::{aggregate_scoring, evaluate_asr, run_ablation, score_rows, write_asr_rows, write_score_rows};
use alignfree::lm::{build_text_input, DecodeOptions, Task, Vocabulary};
use alignfree::train::{checkpoint::write_atomic, init_from_checkpoint, loss_log_csv, train_stage, ModelState, Provenance};
use alignfree::Error;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Directory under which every command creates its run directory.
const RUN_ROOT_ENV: &str = "ALIGNFREE_RUN_ROOT";

#[derive(Parser)]
#[command(name = "alignfree", version, about = "Align-free pronunciation assessment on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Asr,
    Scoring,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus (audio + manifests).
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write here instead of <run dir>/corpus.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the LM on the text-side tasks (or reuse the cached weights).
    PretrainLm {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one stage. The LM stays frozen.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from this checkpoint (e.g. stage 1 for stage 2).
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Also copy the final checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corpus directory from gen-corpus; rendered from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Defaults to asr for stage-1 checkpoints and scoring otherwise.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Score without the prompt sentence.
        #[arg(long)]
        no_prompt: bool,
    },
    /// Four-arm ablation: ASR training and prompt text on/off.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score (or transcribe) one raw little-endian f32 audio file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value_t = 2000)]
        sample_rate: u32,
        /// Prompt sentence; omit to score without it.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, value_enum, default_value = "scoring")]
        task: TaskArg,
    },
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::toy()),
    }
}

/// `<run root>/<command>-<config hash>-<timestamp>`, with a numeric suffix on collision.
/// The resolved config is written into it.
fn make_run_dir(command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = run_root().join(format!("{command}-{}-{stamp}", cfg.hash()));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.json"), cfg.to_json_pretty().as_bytes())?;
    eprintln!("run directory: {}", dir.display());
    Ok(dir)
}

fn load_split(cfg: &RunConfig, corpus: Option<&Path>, split: Split) -> Result<Vec<Utterance>> {
    let data = match corpus {
        Some(dir) => load_manifest(&manifest_path(dir, split))?,
        None => cfg.corpus.render_split(split)?,
    };
    if data.is_empty() {
        bail!("{} split is empty", split.name());
    }
    Ok(data)
}

fn pretrained(cfg: &RunConfig) -> Result<(alignfree::lm::DecoderLm<f32>, String)> {
    let cache = run_root().join("lm-cache");
    let steps = cfg.lm_pretrain.steps;
    Ok(cfg.pretrained_lm(&cache, |step, loss| {
        if step % 100 == 0 || step + 1 == steps {
            eprintln!("lm pretrain step {step}/{steps} loss {loss:.4}");
        }
    })?)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn cmd_gen_corpus(config: Option<PathBuf>, out: Option<PathBuf>, force: bool) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let run = make_run_dir("gen-corpus", &cfg)?;
    let out = out.unwrap_or_else(|| run.join("corpus"));
    generate_corpus(&cfg.corpus, &out, force)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_pretrain(config: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let run = make_run_dir("pretrain-lm", &cfg)?;
    let (_, origin) = pretrained(&cfg)?;
    write_json(&run.join("lm.json"), &serde_json::json!({ "origin": origin, "key": cfg.lm_key() }))?;
    println!("{origin}");
    Ok(())
}

fn cmd_train(stage: u8, config: Option<PathBuf>, init_from: Option<PathBuf>, out: Option<PathBuf>, corpus: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let tcfg = match stage {
        1 => cfg.train_stage1.clone(),
        2 => cfg.train_stage2.clone(),
        s => return Err(Error::InvalidStage(s).into()),
    };
    let run = make_run_dir(&format!("train-stage{stage}"), &cfg)?;
    let train = load_split(&cfg, corpus.as_deref(), Split::Train)?;
    let init = match &init_from {
        Some(p) => {
            let src = ModelState::load(p).with_context(|| format!("loading {}", p.display()))?;
            if src.model.config != cfg.model() {
                bail!("{}: model sections of the config differ from the checkpoint", p.display());
            }
            init_from_checkpoint(&src)?
        }
        None => {
            let (lm, origin) = pretrained(&cfg)?;
            ModelState::fresh(&cfg.model(), cfg.seed, lm, &origin)?
        }
    };
    eprintln!("training stage {stage}: {} utterances, {} epochs", train.len(), tcfg.epochs);
    let (state, log) = train_stage(&tcfg, &train, &[], init)?;
    for r in &log {
        eprintln!("epoch {} {} loss {:.4}", r.epoch, r.split, r.loss);
    }
    let ckpt = run.join("model.ckpt");
    state.save(&ckpt)?;
    write_atomic(&run.join("loss.csv"), loss_log_csv(&log).as_bytes())?;
    write_json(
        &run.join("train.json"),
        &serde_json::json!({
            "stage": stage,
            "stage_provenance": state.provenance,
            "init_from": state.init_from,
            "lm_origin": state.lm_origin,
            "sha256": state.sha256()?,
            "final_loss": log.last().map(|r| r.loss),
        }),
    )?;
    if let Some(o) = out {
        state.save(&o)?;
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn cmd_evaluate(checkpoint: PathBuf, config: Option<PathBuf>, corpus: Option<PathBuf>, task: Option<TaskArg>, no_prompt: bool) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let state = ModelState::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let task = task.unwrap_or(if state.provenance == Provenance::Stage1 { TaskArg::Asr } else { TaskArg::Scoring });
    let run = make_run_dir("evaluate", &cfg)?;
    let test = load_split(&cfg, corpus.as_deref(), Split::Test)?;
    let table = match task {
        TaskArg::Asr => {
            let (rep, rows) = evaluate_asr(&state.model, &test, &cfg.eval)?;
            write_asr_rows(&run.join("predictions.csv"), &rows)?;
            write_json(&run.join("report.json"), &rep)?;
            rep.to_table()
        }
        TaskArg::Scoring => {
            let use_prompt = cfg.train_stage2.use_prompt_text && !no_prompt;
            let rows = score_rows(&state.model, &test, use_prompt, &cfg.eval)?;
            write_score_rows(&run.join("predictions.csv"), &rows)?;
            let rep = aggregate_scoring(&rows)?;
            write_json(&run.join("report.json"), &rep)?;
            rep.to_table()
        }
    };
    write_atomic(&run.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(config: Option<PathBuf>, seeds: Vec<u64>, corpus: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let run = make_run_dir("ablate", &cfg)?;
    let train = load_split(&cfg, corpus.as_deref(), Split::Train)?;
    let test = load_split(&cfg, corpus.as_deref(), Split::Test)?;
    let (lm, origin) = pretrained(&cfg)?;
    let report = run_ablation(&cfg.ablation(), &seeds, &train, &test, &lm, &origin, Some(&run), |m| eprintln!("{m}"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_infer(checkpoint: PathBuf, audio: PathBuf, sample_rate: u32, prompt: Option<String>, task: TaskArg) -> Result<()> {
    let state = ModelState::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let samples = read_audio(&audio)?;
    let vocab = Vocabulary::default();
    let (bundle, opts) = match task {
        TaskArg::Asr => (build_text_input(&vocab, Task::Asr, prompt.as_deref())?, DecodeOptions { max_new_tokens: 64, constrained: false }),
        TaskArg::Scoring => (
            build_text_input(&vocab, Task::Scoring, prompt.as_deref())?,
            DecodeOptions { max_new_tokens: alignfree::lm::ScoreGrammar::max_len(), constrained: true },
        ),
    };
    println!("{}", state.model.generate(&vocab, &samples, sample_rate, &bundle, opts)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus { config, out, force } => cmd_gen_corpus(config, out, force),
        Command::PretrainLm { config } => cmd_pretrain(config),
        Command::Train { stage, config, init_from, out, corpus } => cmd_train(stage, config, init_from, out, corpus),
        Command::Evaluate { checkpoint, config, corpus, task, no_prompt } => cmd_evaluate(checkpoint, config, corpus, task, no_prompt),
        Command::Ablate { config, seeds, corpus } => cmd_ablate(config, seeds, corpus),
        Command::Infer { checkpoint, audio, sample_rate, prompt, task } => cmd_infer(checkpoint, audio, sample_rate, prompt, task),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
