//! Analytic gradients against central finite differences, in f64, on a tiny model.

use alignfree::adapter::AdapterConfig;
use alignfree::encoder::{ConvLayer, ConvSpec, EncoderConfig};
use alignfree::lm::{build_text_input, DecoderLm, LmConfig, PromptBundle, Task, TokenId, Vocabulary};
use alignfree::model::{Model, ModelConfig};
use alignfree::nn::{Init, Params};
use alignfree::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const COORDS: usize = 24;

fn tiny_config() -> ModelConfig {
    let layer = |kernel, stride| ConvLayer { channels: 6, kernel, stride };
    ModelConfig {
        encoder: EncoderConfig {
            conv: ConvSpec { layers: vec![layer(10, 5), layer(3, 2), layer(3, 2)] },
            n_transformer_layers: 1,
            model_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
        },
        adapter: AdapterConfig { pool_kernel: 2, pool_stride: 2, n_heads: 2, in_dim: 8, out_dim: 8 },
        lm: LmConfig { n_layers: 1, model_dim: 8, n_heads: 2, ffn_dim: 16, max_seq_len: 64, ..LmConfig::default() },
    }
}

fn waveform() -> Vec<f64> {
    (0..220).map(|i| (i as f64 * 0.31).sin() * 0.8 + (i as f64 * 0.07).cos() * 0.3).collect()
}

fn inputs() -> (PromptBundle, Vec<TokenId>) {
    let v = Vocabulary::default();
    (build_text_input(&v, Task::Scoring, Some("ka")).unwrap(), v.tokenize("accuracy:9 fluency:7").unwrap())
}

/// Fourth-order central difference of `f` at `x`.
fn central(x: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (-f(x + 2.0 * H) + 8.0 * f(x + H) - 8.0 * f(x - H) + f(x - 2.0 * H)) / (12.0 * H)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Picks `COORDS` random (tensor, element) coordinates of `p` whose names start with `prefix`.
fn coords<P: Params<f64>>(p: &P, prefix: &str, seed: u64) -> Vec<(String, usize)> {
    let named = p.named();
    let pool: Vec<(String, usize)> = named
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(n, m)| (0..m.data().len()).map(move |i| (n.clone(), i)))
        .collect();
    assert!(!pool.is_empty(), "no tensors under {prefix}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..COORDS).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
}

fn get<P: Params<f64>>(p: &P, name: &str, i: usize) -> f64 {
    p.named().into_iter().find(|(n, _)| n == name).unwrap().1.data()[i]
}

fn set<P: Params<f64>>(p: &mut P, name: &str, i: usize, v: f64) {
    p.named_mut().into_iter().find(|(n, _)| n == name).unwrap().1.data_mut()[i] = v;
}

fn check_front(prefix: &str, seed: u64) {
    let cfg = tiny_config();
    let model = Model::<f64>::new(&cfg, 5).unwrap();
    let (bundle, target) = inputs();
    let wave = waveform();
    let mut grads = model.front.zeros_like();
    model.loss(&wave, 2000, &bundle, &target, Some(&mut grads)).unwrap();
    let mut worst = 0.0f64;
    for (name, i) in coords(&model.front, prefix, seed) {
        let mut m = model.clone();
        let num = central(get(&model.front, &name, i), |v| {
            set(&mut m.front, &name, i, v);
            m.loss(&wave, 2000, &bundle, &target, None).unwrap()
        });
        let ana = get(&grads, &name, i);
        let e = rel_err(ana, num);
        assert!(e < TOL, "{name}[{i}]: analytic {ana:e}, numeric {num:e}, rel {e:e}");
        worst = worst.max(e);
    }
    eprintln!("{prefix}: worst relative error {worst:e}");
}

#[test]
fn encoder_gradients_match_finite_differences() {
    check_front("encoder.", 11);
}

#[test]
fn encoder_first_conv_gradients_match_finite_differences() {
    check_front("encoder.conv0", 12);
}

#[test]
fn adapter_gradients_match_finite_differences() {
    check_front("adapter.", 13);
}

fn lm_loss(lm: &DecoderLm<f64>, speech: &Mat<f64>, bundle: &PromptBundle, target: &[TokenId]) -> f64 {
    lm.forward_loss(speech, bundle, target).unwrap().0
}

#[test]
fn lm_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let lm = DecoderLm::<f64>::new(&cfg.lm, &mut Init::new(21)).unwrap();
    let speech = Mat::from_fn(6, 8, |r, c| ((r * 8 + c) as f64 * 0.53).sin());
    let (bundle, target) = inputs();
    let (_, cache) = lm.forward_loss(&speech, &bundle, &target).unwrap();
    let mut grads = lm.clone();
    grads.zero_();
    let d_speech = lm.backward(&cache, Some(&mut grads));

    // parameters, skipping embedding rows that never occur in this sequence
    let used: Vec<usize> = cache.token_ids().iter().map(|&t| t as usize).collect();
    let seq_len = cache.seq_len();
    let named = lm.named();
    let pool: Vec<(String, usize)> = named
        .iter()
        .flat_map(|(n, m)| (0..m.data().len()).map(move |i| (n.clone(), i)))
        .filter(|(n, i)| match n.as_str() {
            "tok_emb" => used.contains(&(i / 8)),
            "pos_emb" => i / 8 < seq_len,
            _ => true,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..3 * COORDS {
        let (name, i) = pool[rng.random_range(0..pool.len())].clone();
        let mut m = lm.clone();
        let num = central(get(&lm, &name, i), |v| {
            set(&mut m, &name, i, v);
            lm_loss(&m, &speech, &bundle, &target)
        });
        let ana = get(&grads, &name, i);
        let e = rel_err(ana, num);
        assert!(e < TOL, "{name}[{i}]: analytic {ana:e}, numeric {num:e}, rel {e:e}");
        worst = worst.max(e);
    }

    // speech-prefix input gradient, which is what reaches the adapter
    for _ in 0..COORDS {
        let (r, c) = (rng.random_range(0..speech.rows()), rng.random_range(0..speech.cols()));
        let mut s = speech.clone();
        let num = central(speech.get(r, c), |v| {
            s.set(r, c, v);
            lm_loss(&lm, &s, &bundle, &target)
        });
        let e = rel_err(d_speech.get(r, c), num);
        assert!(e < TOL, "speech[{r},{c}]: analytic {:e}, numeric {num:e}", d_speech.get(r, c));
        worst = worst.max(e);
    }
    eprintln!("lm: worst relative error {worst:e}");
}
