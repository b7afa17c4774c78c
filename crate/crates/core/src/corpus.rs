//! Deterministic synthetic learner corpus and its on-disk format.
//!
//! Every symbol renders as a fixed-frequency sinusoid with short linear fades; a learner
//! "mispronounces" by substituting symbols, and disfluency shows up as inserted silences and
//! uneven token durations. Accuracy labels depend only on token identity, fluency labels
//! only on timing.
//!
//! On disk a corpus is a directory holding `train.jsonl`, `test.jsonl`, `corpus_config.json`
//! and one headerless little-endian `f32` file per utterance under `audio/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::edit_distance;
use crate::error::{Error, Result};

pub const AUDIO_EXT: &str = "f32le";
const FADE_MS: f64 = 5.0;
const MIN_DURATION_FACTOR: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolClass {
    Consonant,
    Vowel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub symbol: char,
    pub class: SymbolClass,
    pub freq_hz: f64,
}

/// The symbol set a corpus is rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    pub symbols: Vec<SymbolSpec>,
    pub base_duration_ms: f64,
}

impl Default for PhonemeInventory {
    /// 15 consonants and 5 vowels at 100, 140, ..., 860 Hz, 100 ms nominal duration.
    fn default() -> Self {
        let cons = "bdfghklmnprstvz".chars().map(|c| (c, SymbolClass::Consonant));
        let vows = "aeiou".chars().map(|c| (c, SymbolClass::Vowel));
        let symbols = cons
            .chain(vows)
            .enumerate()
            .map(|(i, (symbol, class))| SymbolSpec { symbol, class, freq_hz: 100.0 + 40.0 * i as f64 })
            .collect();
        Self { symbols, base_duration_ms: 100.0 }
    }
}

impl PhonemeInventory {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.symbols.is_empty() {
            return Err(Error::Config("inventory has no symbols".into()));
        }
        for (i, s) in self.symbols.iter().enumerate() {
            if !s.symbol.is_ascii_lowercase() {
                return Err(Error::Config(format!("symbol {:?} must be a lowercase ascii letter", s.symbol)));
            }
            if self.symbols[..i].iter().any(|o| o.symbol == s.symbol) {
                return Err(Error::Config(format!("duplicate symbol {:?}", s.symbol)));
            }
            let nyquist = sample_rate as f64 / 2.0;
            if !(s.freq_hz > 0.0) || s.freq_hz >= nyquist {
                return Err(Error::AboveNyquist { symbol: s.symbol, freq_hz: s.freq_hz, nyquist_hz: nyquist });
            }
        }
        for class in [SymbolClass::Consonant, SymbolClass::Vowel] {
            let n = self.symbols.iter().filter(|s| s.class == class).count();
            if n == 1 {
                return Err(Error::Config(format!("{class:?} class needs at least 2 symbols for substitution")));
            }
        }
        if !(self.base_duration_ms > 2.0 * FADE_MS) {
            return Err(Error::Config("base_duration_ms must exceed the fade length".into()));
        }
        Ok(())
    }

    pub fn get(&self, symbol: char) -> Option<&SymbolSpec> {
        self.symbols.iter().find(|s| s.symbol == symbol)
    }

    fn of_class(&self, class: SymbolClass) -> impl Iterator<Item = &SymbolSpec> {
        self.symbols.iter().filter(move |s| s.class == class)
    }
}

/// Recipe for one utterance: the canonical text and how badly the learner reads it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    /// Words separated by single spaces; every non-space character is one token.
    pub prompt_text: String,
    pub substitution_prob: f64,
    pub pause_insertion_prob: f64,
    pub pause_duration_ms: f64,
    pub tempo_jitter: f64,
    pub seed: u64,
}

impl UtteranceSpec {
    pub fn validate(&self) -> Result<()> {
        if tokens(&self.prompt_text).is_empty() {
            return Err(Error::EmptyPrompt);
        }
        for (name, p) in [("substitution_prob", self.substitution_prob), ("pause_insertion_prob", self.pause_insertion_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.pause_duration_ms > 0.0) {
            return Err(Error::Config("pause_duration_ms must be positive".into()));
        }
        if !(self.tempo_jitter >= 0.0) {
            return Err(Error::Config("tempo_jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One synthetic learner recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub spoken_text: String,
    pub prompt_text: String,
    pub accuracy: u8,
    pub fluency: u8,
}

impl Utterance {
    pub fn spoken_tokens(&self) -> Vec<char> {
        tokens(&self.spoken_text)
    }

    pub fn prompt_tokens(&self) -> Vec<char> {
        tokens(&self.prompt_text)
    }
}

/// A contiguous stretch of the rendered waveform: a symbol, or silence (`None`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub symbol: Option<char>,
    pub len: usize,
}

pub fn tokens(text: &str) -> Vec<char> {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

/// `round(10 * (1 - TER))`, TER clamped to `[0, 1]`.
pub fn accuracy_label(prompt: &[char], spoken: &[char]) -> u8 {
    let ter = (edit_distance(prompt, spoken) as f64 / prompt.len() as f64).min(1.0);
    (10.0 * (1.0 - ter)).round() as u8
}

/// `round(10 * (1 - clamp(2 * pause_ratio + jitter_cv, 0, 1)))`.
pub fn fluency_label(silence_samples: usize, total_samples: usize, token_durations: &[usize]) -> u8 {
    let pause_ratio = silence_samples as f64 / total_samples as f64;
    let n = token_durations.len() as f64;
    let mean = token_durations.iter().sum::<usize>() as f64 / n;
    let var = token_durations.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / n;
    let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    let disruption = (2.0 * pause_ratio + cv).clamp(0.0, 1.0);
    (10.0 * (1.0 - disruption)).round() as u8
}

pub fn render_utterance(spec: &UtteranceSpec, inventory: &PhonemeInventory, sample_rate: u32) -> Result<Utterance> {
    render_with_segments(spec, inventory, sample_rate).map(|(u, _)| u)
}

/// Renders an utterance and also returns its symbol/silence timeline.
pub fn render_with_segments(
    spec: &UtteranceSpec,
    inventory: &PhonemeInventory,
    sample_rate: u32,
) -> Result<(Utterance, Vec<Segment>)> {
    spec.validate()?;
    inventory.validate(sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sr = sample_rate as f64;

    // substitution, word boundaries preserved
    let mut spoken_text = String::with_capacity(spec.prompt_text.len());
    for c in spec.prompt_text.chars() {
        if c == ' ' {
            spoken_text.push(c);
            continue;
        }
        let sym = inventory.get(c).ok_or(Error::UnknownChar(c))?;
        if rng.random::<f64>() < spec.substitution_prob {
            let others: Vec<char> = inventory.of_class(sym.class).filter(|s| s.symbol != c).map(|s| s.symbol).collect();
            spoken_text.push(others[rng.random_range(0..others.len())]);
        } else {
            spoken_text.push(c);
        }
    }
    let spoken = tokens(&spoken_text);
    let prompt = tokens(&spec.prompt_text);

    let fade = (FADE_MS / 1000.0 * sr).round() as usize;
    let pause_len = ((spec.pause_duration_ms / 1000.0 * sr).round() as usize).max(1);
    let mut samples: Vec<f32> = Vec::new();
    let mut segments = Vec::with_capacity(2 * spoken.len());
    let mut durations = Vec::with_capacity(spoken.len());
    let mut silence = 0usize;
    for (i, &c) in spoken.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let factor = (1.0 + spec.tempo_jitter * z).max(MIN_DURATION_FACTOR);
        let n = ((inventory.base_duration_ms / 1000.0 * sr * factor).round() as usize).max(1);
        let freq = inventory.get(c).expect("substituted symbol comes from the inventory").freq_hz;
        let f = fade.min(n / 2);
        for k in 0..n {
            let mut v = (2.0 * std::f64::consts::PI * freq * k as f64 / sr).sin();
            if f > 0 {
                if k < f {
                    v *= k as f64 / f as f64;
                } else if k >= n - f {
                    v *= (n - 1 - k) as f64 / f as f64;
                }
            }
            samples.push(v as f32);
        }
        durations.push(n);
        segments.push(Segment { symbol: Some(c), len: n });
        if i + 1 < spoken.len() && rng.random::<f64>() < spec.pause_insertion_prob {
            samples.extend(std::iter::repeat_n(0.0f32, pause_len));
            silence += pause_len;
            segments.push(Segment { symbol: None, len: pause_len });
        }
    }

    let utt = Utterance {
        id: format!("utt-{:016x}", spec.seed),
        accuracy: accuracy_label(&prompt, &spoken),
        fluency: fluency_label(silence, samples.len(), &durations),
        samples,
        sample_rate,
        spoken_text,
        prompt_text: spec.prompt_text.clone(),
    };
    Ok((utt, segments))
}

/// Zero-inflated, capped exponential used for per-utterance corruption levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDist {
    /// Probability the level is exactly zero.
    pub zero_prob: f64,
    pub mean: f64,
    pub max: f64,
}

impl LevelDist {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if rng.random::<f64>() < self.zero_prob {
            return 0.0;
        }
        let u: f64 = rng.random();
        (-self.mean * (1.0 - u).ln()).min(self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub sample_rate: u32,
    pub inventory: PhonemeInventory,
    /// Number of consonant-vowel words in the lexicon prompts are drawn from.
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub substitution: LevelDist,
    pub pause: LevelDist,
    pub jitter: LevelDist,
    pub pause_duration_ms: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            n_train: 500,
            n_test: 200,
            sample_rate: 2000,
            inventory: PhonemeInventory::default(),
            lexicon_size: 24,
            min_words: 3,
            max_words: 5,
            substitution: LevelDist { zero_prob: 0.15, mean: 0.15, max: 1.0 },
            pause: LevelDist { zero_prob: 0.3, mean: 0.12, max: 1.0 },
            jitter: LevelDist { zero_prob: 0.0, mean: 0.08, max: 0.5 },
            pause_duration_ms: 200.0,
        }
    }
}

/// splitmix64 finalizer; decorrelates per-item seeds derived from one base seed.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.inventory.validate(self.sample_rate)?;
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        let n_cv = self.inventory.of_class(SymbolClass::Consonant).count() * self.inventory.of_class(SymbolClass::Vowel).count();
        if self.lexicon_size == 0 || self.lexicon_size > n_cv {
            return Err(Error::Config(format!("lexicon_size must be in 1..={n_cv}")));
        }
        if !(self.pause_duration_ms > 0.0) {
            return Err(Error::Config("pause_duration_ms must be positive".into()));
        }
        Ok(())
    }

    /// Consonant-vowel words drawn without replacement, fixed by the corpus seed.
    pub fn lexicon(&self) -> Vec<String> {
        let mut all: Vec<String> = Vec::new();
        for c in self.inventory.of_class(SymbolClass::Consonant) {
            for v in self.inventory.of_class(SymbolClass::Vowel) {
                all.push([c.symbol, v.symbol].iter().collect());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, u64::MAX));
        // partial Fisher-Yates
        for i in 0..self.lexicon_size.min(all.len()) {
            let j = rng.random_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(self.lexicon_size);
        all
    }

    /// Spec of the utterance at global `index` (train first, then test).
    pub fn utterance_spec(&self, lexicon: &[String], index: u64) -> UtteranceSpec {
        let seed = mix_seed(self.seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5_A5A5_A5A5);
        let n_words = rng.random_range(self.min_words..=self.max_words);
        let words: Vec<&str> = (0..n_words).map(|_| lexicon[rng.random_range(0..lexicon.len())].as_str()).collect();
        UtteranceSpec {
            prompt_text: words.join(" "),
            substitution_prob: self.substitution.sample(&mut rng),
            pause_insertion_prob: self.pause.sample(&mut rng),
            pause_duration_ms: self.pause_duration_ms,
            tempo_jitter: self.jitter.sample(&mut rng),
            seed,
        }
    }

    /// Renders utterances `range` of the global index space, in parallel, in index order.
    pub fn render_range(&self, range: std::ops::Range<u64>, id_prefix: &str) -> Result<Vec<Utterance>> {
        self.validate()?;
        let lexicon = self.lexicon();
        let start = range.start;
        range
            .into_par_iter()
            .map(|i| {
                let spec = self.utterance_spec(&lexicon, i);
                let mut u = render_utterance(&spec, &self.inventory, self.sample_rate)?;
                u.id = format!("{id_prefix}-{:05}", i - start);
                Ok(u)
            })
            .collect()
    }

    pub fn render_split(&self, split: Split) -> Result<Vec<Utterance>> {
        let (n_tr, n_te) = (self.n_train as u64, self.n_test as u64);
        match split {
            Split::Train => self.render_range(0..n_tr, "train"),
            Split::Test => self.render_range(n_tr..n_tr + n_te, "test"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    audio_path: String,
    sample_rate: u32,
    spoken_text: String,
    prompt_text: String,
    accuracy: i64,
    fluency: i64,
}

pub fn write_audio(path: &Path, samples: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_audio(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Config(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// Writes audio files to `<manifest dir>/audio/` and the JSONL manifest itself.
pub fn write_manifest(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut out = String::new();
    for u in utterances {
        let rel = format!("audio/{}.{AUDIO_EXT}", u.id);
        write_audio(&dir.join(&rel), &u.samples)?;
        let rec = ManifestRecord {
            id: u.id.clone(),
            audio_path: rel,
            sample_rate: u.sample_rate,
            spoken_text: u.spoken_text.clone(),
            prompt_text: u.prompt_text.clone(),
            accuracy: u.accuracy as i64,
            fluency: u.fluency as i64,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |record: &str, reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            record: record.to_string(),
            reason,
        };
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| bad("?", format!("malformed record: {e}")))?;
        for (name, v) in [("accuracy", rec.accuracy), ("fluency", rec.fluency)] {
            if !(0..=10).contains(&v) {
                return Err(bad(&rec.id, format!("{name} {v} outside 0..=10")));
            }
        }
        let audio = dir.join(&rec.audio_path);
        let samples = read_audio(&audio).map_err(|e| bad(&rec.id, format!("audio {}: {e}", audio.display())))?;
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(bad(&rec.id, "audio contains non-finite samples".into()));
        }
        out.push(Utterance {
            id: rec.id,
            samples,
            sample_rate: rec.sample_rate,
            spoken_text: rec.spoken_text,
            prompt_text: rec.prompt_text,
            accuracy: rec.accuracy as u8,
            fluency: rec.fluency as u8,
        });
    }
    Ok(out)
}

pub fn manifest_path(corpus_dir: &Path, split: Split) -> PathBuf {
    corpus_dir.join(format!("{}.jsonl", split.name()))
}

/// Renders the whole corpus into `out_dir`.
///
/// Refuses to touch a non-empty directory unless `force`; with `force` the previous
/// manifests and audio directory are removed first so no stale files survive.
pub fn generate_corpus(config: &CorpusConfig, out_dir: &Path, force: bool) -> Result<()> {
    config.validate()?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(out_dir.to_path_buf()));
        }
        for stale in ["train.jsonl", "test.jsonl", "corpus_config.json"] {
            let p = out_dir.join(stale);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let audio = out_dir.join("audio");
        if audio.exists() {
            fs::remove_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for split in [Split::Train, Split::Test] {
        let utts = config.render_split(split)?;
        write_manifest(&manifest_path(out_dir, split), &utts)?;
    }
    let cfg_path = out_dir.join("corpus_config.json");
    let mut f = fs::File::create(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    f.write_all(serde_json::to_string_pretty(config)?.as_bytes()).map_err(|e| Error::io(&cfg_path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(())
}
