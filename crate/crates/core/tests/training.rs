use alignfree::adapter::AdapterConfig;
use alignfree::corpus::{CorpusConfig, Split, Utterance};
use alignfree::encoder::{ConvLayer, ConvSpec, EncoderConfig};
use alignfree::lm::{DecoderLm, LmConfig, Vocabulary, PREFIX_PA};
use alignfree::model::ModelConfig;
use alignfree::nn::{Init, Params};
use alignfree::train::{
    checkpoint, freeze_mask, init_from_checkpoint, make_target, train_stage, ModelState, Provenance, TrainConfig,
};

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            conv: ConvSpec { layers: ConvSpec::toy().layers.iter().map(|l| ConvLayer { channels: 16, ..*l }).collect() },
            n_transformer_layers: 1,
            model_dim: 32,
            n_heads: 4,
            ffn_dim: 64,
        },
        adapter: AdapterConfig { n_heads: 4, in_dim: 32, out_dim: 32, ..AdapterConfig::default() },
        lm: LmConfig { n_layers: 1, model_dim: 32, n_heads: 4, ffn_dim: 64, ..LmConfig::default() },
    }
}

fn data(n: usize) -> Vec<Utterance> {
    CorpusConfig { n_train: n, n_test: 0, ..CorpusConfig::default() }.render_split(Split::Train).unwrap()
}

fn fresh(seed: u64) -> ModelState {
    let cfg = small_model();
    let lm = DecoderLm::new(&cfg.lm, &mut Init::new(99)).unwrap();
    ModelState::fresh(&cfg, seed, lm, "random").unwrap()
}

fn lm_bytes(s: &ModelState) -> Vec<u32> {
    s.model.lm.named().iter().flat_map(|(_, m)| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn quick(stage: u8) -> TrainConfig {
    let base = if stage == 1 { TrainConfig::stage1() } else { TrainConfig::stage2() };
    TrainConfig { epochs: 2, batch_size: 4, ..base }
}

#[test]
fn lm_is_bitwise_frozen_through_both_stages() {
    let d = data(20);
    let init = fresh(1);
    let before = lm_bytes(&init);
    let front_before = init.model.front.clone();
    let (s1, log1) = train_stage(&quick(1), &d, &d[..4], init).unwrap();
    assert_eq!(lm_bytes(&s1), before);
    assert_ne!(s1.model.front, front_before);
    assert_eq!(log1.len(), 4);
    let (s2, _) = train_stage(&quick(2), &d, &[], init_from_checkpoint(&s1).unwrap()).unwrap();
    assert_eq!(lm_bytes(&s2), before);

    // and in the stored checkpoint
    let decoded = checkpoint::decode(&s2.to_bytes().unwrap()).unwrap();
    for (name, m) in s2.model.lm.named() {
        assert_eq!(decoded.tensors[&format!("lm.{name}")], *m, "{name}");
    }
    assert_eq!(decoded.meta["freeze_flags"], serde_json::json!({"encoder": false, "adapter": false, "lm": true}));
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let d = data(4);
    let (s, _) = train_stage(&TrainConfig { epochs: 1, ..quick(1) }, &d, &[], fresh(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    s.save(&p).unwrap();
    let back = ModelState::load(&p).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
    assert_eq!(&std::fs::read(&p).unwrap()[..8], checkpoint::MAGIC);

    let mut bad = std::fs::read(&p).unwrap();
    bad.truncate(bad.len() - 4);
    assert!(ModelState::from_bytes(&bad).is_err());
}

#[test]
fn training_is_deterministic() {
    let d = data(8);
    let run = || train_stage(&quick(1), &d, &[], fresh(3)).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(la, lb);
    let (c, _) = train_stage(&TrainConfig { seed: 1, ..quick(1) }, &d, &[], fresh(3)).unwrap();
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn stage_two_from_stage_one_differs_only_in_init_record() {
    let d = data(4);
    let (s1, _) = train_stage(&TrainConfig { epochs: 1, ..quick(1) }, &d, &[], fresh(4)).unwrap();
    let from_s1 = init_from_checkpoint(&s1).unwrap();
    let rec = from_s1.init_from.clone().unwrap();
    assert_eq!(rec.provenance, Provenance::Stage1);
    assert_eq!(rec.sha256, s1.sha256().unwrap());
    let mut stripped = from_s1.clone();
    stripped.init_from = None;
    assert_eq!(stripped, ModelState { provenance: Provenance::None, ..s1 });

    let (s2, _) = train_stage(&TrainConfig { epochs: 1, ..quick(2) }, &d, &[], from_s1).unwrap();
    assert_eq!(s2.provenance, Provenance::Stage2);
    assert_eq!(s2.init_from, Some(rec));
    let (scratch, _) = train_stage(&TrainConfig { epochs: 1, ..quick(2) }, &d, &[], fresh(4)).unwrap();
    assert_eq!(scratch.init_from, None);
}

#[test]
fn targets_and_masks() {
    let v = Vocabulary::default();
    let u = Utterance {
        id: "x".into(),
        samples: vec![],
        sample_rate: 2000,
        spoken_text: "ka lo mi".into(),
        prompt_text: "ka lu mi".into(),
        accuracy: 9,
        fluency: 7,
    };
    let (b, t) = make_target(&v, 1, &u, false).unwrap();
    assert_eq!((v.render(&b.token_ids), t.as_str()), ("<transcript>".into(), "ka lo mi"));
    let (b, t) = make_target(&v, 2, &u, true).unwrap();
    assert_eq!(t, "accuracy:9 fluency:7");
    assert_eq!(v.render(&b.token_ids), "<Pronunciation Assessment> the prompt text is ka lu mi");
    let (b, _) = make_target(&v, 2, &u, false).unwrap();
    assert_eq!(b.token_ids, vec![PREFIX_PA]);
    assert!(make_target(&v, 3, &u, false).is_err());
    assert_eq!(freeze_mask(1).unwrap(), freeze_mask(2).unwrap());
    assert!(freeze_mask(0).is_err());
    assert!(TrainConfig { use_prompt_text: true, ..TrainConfig::stage1() }.validate().is_err());
    TrainConfig { use_prompt_text: false, ..TrainConfig::stage2() }.validate().unwrap();
}

#[test]
fn mismatched_checkpoint_shapes_are_rejected() {
    let s = fresh(5);
    let mut bytes = s.to_bytes().unwrap();
    // corrupt the header so the config claims a wider encoder than the tensors hold
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"ffn_dim\":64").unwrap();
    bytes[at..at + 12].copy_from_slice(b"\"ffn_dim\":65");
    assert!(ModelState::from_bytes(&bytes).is_err());
}
