use alignfree::lm::{
    build_text_input, format_score, greedy_decode, parse_score, DecodeOptions, DecoderLm, LmConfig, ScoreGrammar, ScorePair, Task,
    TokenId, Vocabulary, BOS, EOS,
};
use alignfree::nn::{log_softmax_row, Init};
use alignfree::tensor::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_lm(seed: u64) -> DecoderLm<f64> {
    let cfg = LmConfig { n_layers: 2, model_dim: 8, n_heads: 2, ffn_dim: 16, max_seq_len: 64, ..LmConfig::default() };
    DecoderLm::new(&cfg, &mut Init::new(seed)).unwrap()
}

fn char_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(5..43)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn logits_before_a_change_are_unaffected(seed in any::<u64>(), ts in 1usize..8, n_ids in 2usize..20, pos_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lm = tiny_lm(seed);
        let speech = Mat::from_fn(ts, 8, |_, _| rng.random_range(-1.0..1.0));
        let ids = char_ids(&mut rng, n_ids);
        let j = ((ts + n_ids) as f64 * pos_frac) as usize;
        let (mut s2, mut ids2) = (speech.clone(), ids.clone());
        if j < ts {
            for c in 0..8 {
                s2.set(j, c, rng.random_range(-3.0..3.0));
            }
        } else {
            ids2[j - ts] = 5 + (ids[j - ts] - 5 + 1 + rng.random_range(0..37)) % 38;
        }
        let a = lm.logits(&speech, &ids).unwrap();
        let b = lm.logits(&s2, &ids2).unwrap();
        for r in 0..j {
            prop_assert_eq!(a.row(r), b.row(r), "row {} changed after editing position {}", r, j);
        }
    }

    #[test]
    fn loss_only_sees_target_positions(seed in any::<u64>(), ts in 1usize..6, prompt_len in 1usize..6, target_len in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lm = tiny_lm(seed ^ 1);
        let v = Vocabulary::default();
        let speech = Mat::from_fn(ts, 8, |_, _| rng.random_range(-1.0..1.0));
        let prompt: String = (0..prompt_len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect();
        let bundle = build_text_input(&v, Task::Scoring, Some(&prompt)).unwrap();
        let target = char_ids(&mut rng, target_len);
        let (loss, cache) = lm.forward_loss(&speech, &bundle, &target).unwrap();
        prop_assert_eq!(cache.seq_len(), ts + bundle.token_ids.len() + target_len + 2);

        // independent oracle: recompute from full logits with a separate softmax
        let ids = cache.token_ids().to_vec();
        let logits = lm.logits(&speech, &ids).unwrap();
        let start = ts + bundle.token_ids.len();
        prop_assert_eq!(ids[bundle.token_ids.len()], BOS);
        let mut nll = 0.0;
        for k in 0..=target_len {
            let want = if k < target_len { target[k] } else { EOS } as usize;
            let row = logits.row(start + k);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            nll -= row[want] - m - z.ln();
        }
        let oracle = nll / (target_len + 1) as f64;
        prop_assert!((loss - oracle).abs() < 1e-10, "loss {} vs oracle {}", loss, oracle);

        let d = cache.d_logits();
        for r in 0..d.rows() {
            let target_row = r >= start && r <= start + target_len;
            if !target_row {
                prop_assert!(d.row(r).iter().all(|&g| g == 0.0), "non-target row {} has gradient", r);
            }
        }
    }

    #[test]
    fn detokenize_inverts_tokenize(s in "[a-z0-9 :]{0,40}") {
        let v = Vocabulary::default();
        prop_assert_eq!(v.detokenize(&v.tokenize(&s).unwrap()), s);
    }

    #[test]
    fn parse_rejects_or_roundtrips_arbitrary_strings(s in "\\PC{0,30}") {
        if let Ok(p) = parse_score(&s) {
            prop_assert_eq!(format_score(p), s);
        }
    }

    #[test]
    fn greedy_generation_is_deterministic(seed in any::<u64>()) {
        let lm = tiny_lm(seed);
        let v = Vocabulary::default();
        let speech = Mat::from_fn(4, 8, |r, c| ((r * 8 + c) as f64 + seed as f64).sin());
        let b = build_text_input(&v, Task::Asr, None).unwrap();
        let opts = DecodeOptions { max_new_tokens: 20, constrained: false };
        prop_assert_eq!(lm.generate(&v, &speech, &b, opts).unwrap(), lm.generate(&v, &speech, &b, opts).unwrap());
    }
}

#[test]
fn codec_roundtrip_is_exhaustive() {
    for a in 0..=10 {
        for f in 0..=10 {
            let p = ScorePair::new(a, f).unwrap();
            assert_eq!(parse_score(&format_score(p)).unwrap(), p);
        }
    }
}

#[test]
fn constrained_generation_always_parses_for_random_models() {
    let v = Vocabulary::default();
    let opts = DecodeOptions { max_new_tokens: ScoreGrammar::max_len(), constrained: true };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000u64 {
        let lm = tiny_lm(trial);
        let speech = Mat::from_fn(rng.random_range(1..6), 8, |_, _| rng.random_range(-2.0..2.0));
        let prompt = if trial % 2 == 0 { Some("ka lo") } else { None };
        let b = build_text_input(&v, Task::Scoring, prompt).unwrap();
        let out = v.detokenize(&lm.generate(&v, &speech, &b, opts).unwrap());
        assert!(parse_score(&out).is_ok(), "trial {trial}: {out:?}");
    }
}

/// Walks every grammar state reachable by any token sequence and checks that each has a way
/// forward and that every completed path parses.
#[test]
fn every_grammar_state_leads_to_a_parse() {
    let v = Vocabulary::default();
    let mut stack = vec![(ScoreGrammar::new(), Vec::<TokenId>::new())];
    let mut completed = 0;
    while let Some((g, path)) = stack.pop() {
        let allowed = g.allowed(&v);
        assert!(!allowed.is_empty(), "dead state after {:?}", v.detokenize(&path));
        for t in allowed {
            let mut g2 = g.clone();
            assert!(g2.advance(&v, t));
            if t == EOS {
                assert!(g2.is_done());
                parse_score(&v.detokenize(&path)).unwrap();
                completed += 1;
            } else {
                let mut p = path.clone();
                p.push(t);
                stack.push((g2, p));
            }
        }
    }
    assert_eq!(completed, 121);
}

#[test]
fn random_logit_stubs_decode_to_valid_scores() {
    let v = Vocabulary::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let mut draw = || (0..v.len()).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>();
        let first = draw();
        let out = greedy_decode(&v, first, |_| Ok(draw()), DecodeOptions { max_new_tokens: 23, constrained: true }).unwrap();
        parse_score(&v.detokenize(&out)).unwrap();
    }
}

#[test]
fn log_softmax_rows_normalize() {
    let lp = log_softmax_row(&[1.0f64, 2.0, 3.0]);
    assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
}
