use std::fs;

use alignfree::corpus::{
    accuracy_label, generate_corpus, load_manifest, manifest_path, render_with_segments, write_manifest, CorpusConfig,
    PhonemeInventory, Split, Utterance, UtteranceSpec,
};
use proptest::prelude::*;

/// Plain Wagner-Fischer over full rows, kept separate from the library's aligner.
fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != cb)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn oracle_accuracy(u: &Utterance) -> u8 {
    let (p, s) = (u.prompt_tokens(), u.spoken_tokens());
    let ter = (levenshtein(&p, &s) as f64 / p.len() as f64).min(1.0);
    (10.0 * (1.0 - ter)).round() as u8
}

fn spec(prompt: &str, sub: f64, pause: f64, jitter: f64, seed: u64) -> UtteranceSpec {
    UtteranceSpec { prompt_text: prompt.into(), substitution_prob: sub, pause_insertion_prob: pause, pause_duration_ms: 200.0, tempo_jitter: jitter, seed }
}

#[test]
fn partial_substitution_label_matches_oracle() {
    let inv = PhonemeInventory::default();
    let (u, _) = render_with_segments(&spec("ka lo mi te su", 0.3, 0.0, 0.0, 7), &inv, 2000).unwrap();
    assert_ne!(u.spoken_text, u.prompt_text);
    assert_eq!(u.accuracy, oracle_accuracy(&u));
}

#[test]
fn fluency_is_recomputable_from_the_timeline() {
    let inv = PhonemeInventory::default();
    for seed in 0..50 {
        let (u, segs) = render_with_segments(&spec("ka lo mi te", 0.2, 0.4, 0.2, seed), &inv, 2000).unwrap();
        let silence: usize = segs.iter().filter(|s| s.symbol.is_none()).map(|s| s.len).sum();
        let durs: Vec<f64> = segs.iter().filter(|s| s.symbol.is_some()).map(|s| s.len as f64).collect();
        assert_eq!(segs.iter().map(|s| s.len).sum::<usize>(), u.samples.len());
        let mean = durs.iter().sum::<f64>() / durs.len() as f64;
        let sd = (durs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / durs.len() as f64).sqrt();
        let disruption = (2.0 * silence as f64 / u.samples.len() as f64 + sd / mean).clamp(0.0, 1.0);
        assert_eq!(u.fluency, (10.0 * (1.0 - disruption)).round() as u8, "seed {seed}");
    }
}

#[test]
fn accuracy_ignores_which_positions_were_substituted() {
    let prompt: Vec<char> = "kalomitesu".chars().collect();
    let mut seen = Vec::new();
    for mask in 0u32..(1 << prompt.len()) {
        if mask.count_ones() != 3 {
            continue;
        }
        let spoken: Vec<char> = prompt.iter().enumerate().map(|(i, &c)| if mask >> i & 1 == 1 { 'z' } else { c }).collect();
        seen.push(accuracy_label(&prompt, &spoken));
    }
    assert!(seen.iter().all(|&a| a == 7), "{seen:?}");
}

#[test]
fn default_corpus_is_deterministic_and_skewed_high() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = CorpusConfig::default();
    generate_corpus(&cfg, &a, false).unwrap();
    generate_corpus(&cfg, &b, false).unwrap();
    assert_eq!(fs::read_dir(a.join("audio")).unwrap().count(), 700);
    for name in ["train.jsonl", "test.jsonl", "corpus_config.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let mut n_audio = 0;
    for e in fs::read_dir(a.join("audio")).unwrap() {
        let p = e.unwrap().path();
        assert_eq!(fs::read(&p).unwrap(), fs::read(b.join("audio").join(p.file_name().unwrap())).unwrap());
        n_audio += 1;
    }
    assert_eq!(n_audio, 700);

    let train = load_manifest(&manifest_path(&a, Split::Train)).unwrap();
    let test = load_manifest(&manifest_path(&a, Split::Test)).unwrap();
    assert_eq!((train.len(), test.len()), (500, 200));
    assert_eq!(train, cfg.render_split(Split::Train).unwrap());
    for u in train.iter().chain(&test) {
        assert_eq!(u.accuracy, oracle_accuracy(u), "{}", u.id);
        assert!(u.fluency <= 10 && u.samples.iter().all(|v| v.is_finite()));
    }
    for pick in [|u: &Utterance| u.accuracy, |u: &Utterance| u.fluency] {
        let high = train.iter().filter(|u| pick(u) >= 6).count();
        assert!(high * 2 > train.len(), "{high} of {} at 6 or above", train.len());
    }

    assert!(generate_corpus(&cfg, &a, false).is_err());
    generate_corpus(&cfg, &a, true).unwrap();
    assert_eq!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(b.join("train.jsonl")).unwrap());
}

#[test]
fn empty_manifest_loads_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    write_manifest(&p, &[]).unwrap();
    assert!(load_manifest(&p).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn manifest_roundtrip(words in prop::collection::vec("[bdfghklmnprstvz][aeiou]", 1..5), sub in 0.0f64..1.0, pause in 0.0f64..1.0, jitter in 0.0f64..0.5, seed in any::<u64>()) {
        let inv = PhonemeInventory::default();
        let (u, _) = render_with_segments(&spec(&words.join(" "), sub, pause, jitter, seed), &inv, 2000).unwrap();
        prop_assert_eq!(u.accuracy, oracle_accuracy(&u));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, std::slice::from_ref(&u)).unwrap();
        prop_assert_eq!(load_manifest(&p).unwrap(), vec![u]);
    }
}
