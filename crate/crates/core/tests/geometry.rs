use alignfree::adapter::{Adapter, AdapterConfig};
use alignfree::encoder::{conv_output_length, ConvLayer, ConvSpec, EncoderConfig, FeatureSequence, SpeechEncoder};
use alignfree::nn::Init;
use alignfree::tensor::Mat;
use proptest::prelude::*;

/// Layer-by-layer recurrence written out longhand.
fn recurrence(mut n: i64, layers: &[(i64, i64)]) -> Option<i64> {
    for &(k, s) in layers {
        if n < k {
            return None;
        }
        n = (n - k).div_euclid(s) + 1;
    }
    Some(n)
}

#[test]
fn preset_lengths_follow_the_recurrence() {
    let full = [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];
    assert_eq!(recurrence(16000, &full), Some(49));
    assert_eq!(conv_output_length(16000, &ConvSpec::paper()).unwrap(), 49);
    assert_eq!(recurrence(2000, &[(10, 5), (3, 2), (3, 2)]), Some(99));
    assert_eq!(conv_output_length(2000, &ConvSpec::toy()).unwrap(), 99);
    let single = ConvSpec { layers: vec![ConvLayer { channels: 4, kernel: 7, stride: 3 }] };
    assert_eq!(conv_output_length(7, &single).unwrap(), 1);
    assert!(conv_output_length(6, &single).is_err());
}

#[test]
fn toy_encoder_and_adapter_shapes() {
    let enc = SpeechEncoder::<f64>::new(&EncoderConfig::default(), &mut Init::new(1)).unwrap();
    let wave: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.1).sin()).collect();
    let h = enc.encode(&wave, 2000).unwrap();
    assert_eq!((h.len(), h.dim()), (99, 64));
    assert_eq!(h, enc.encode(&wave, 2000).unwrap());
    let ad = Adapter::<f64>::new(&AdapterConfig::default(), &mut Init::new(2)).unwrap();
    let out = ad.adapt(&h).unwrap();
    assert_eq!((out.len(), out.dim()), (49, 128));
    assert!(out.values.data().iter().all(|v| v.is_finite()));
    let two = FeatureSequence { values: h.values.slice_rows(0, 2), ..h.clone() };
    assert_eq!(ad.adapt(&two).unwrap().values.rows(), 1);
    let one = FeatureSequence { values: h.values.slice_rows(0, 1), ..h };
    assert!(ad.adapt(&one).is_err());
}

#[test]
fn adapter_length_is_half_for_every_length_up_to_512() {
    let cfg = AdapterConfig { n_heads: 2, in_dim: 4, out_dim: 6, ..AdapterConfig::default() };
    let ad = Adapter::<f64>::new(&cfg, &mut Init::new(3)).unwrap();
    for t in 2..=512usize {
        assert_eq!(cfg.output_len(t).unwrap(), t / 2);
        let x = FeatureSequence { values: Mat::from_fn(t, 4, |r, c| ((r + c) as f64).cos()), frame_stride_samples: 20, sample_rate: 2000 };
        let y = ad.adapt(&x).unwrap();
        assert_eq!(y.values.rows(), t / 2, "T = {t}");
        assert_eq!(y.frame_stride_samples, 40);
    }
}

#[test]
fn unit_impulse_conv_copies_strided_input() {
    let spec = ConvSpec { layers: vec![ConvLayer { channels: 1, kernel: 4, stride: 3 }] };
    let cfg = EncoderConfig { conv: spec, n_transformer_layers: 0, model_dim: 1, n_heads: 1, ffn_dim: 1 };
    let mut enc = SpeechEncoder::<f64>::new(&cfg, &mut Init::new(0)).unwrap();
    let conv = &mut enc.convs[0].conv;
    conv.w.data_mut().fill(0.0);
    conv.w.data_mut()[0] = 1.0;
    let ramp: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let y = conv.forward(&Mat::from_vec(20, 1, ramp.clone()));
    let expected: Vec<f64> = (0..conv_output_length(20, &cfg.conv).unwrap()).map(|t| ramp[3 * t]).collect();
    assert_eq!(y.data(), &expected[..]);
}

#[test]
fn averaging_pool_kernel_averages_pairs() {
    let cfg = AdapterConfig { n_heads: 1, in_dim: 3, out_dim: 3, ..AdapterConfig::default() };
    let mut ad = Adapter::<f64>::new(&cfg, &mut Init::new(4)).unwrap();
    // tap j of channel c lives in row j * C_in + c
    ad.pool.w = Mat::from_fn(6, 3, |r, c| if r % 3 == c { 0.5 } else { 0.0 });
    let rows = Mat::from_fn(4, 3, |r, c| (r * 10 + c) as f64);
    let x = FeatureSequence { values: rows.clone(), frame_stride_samples: 1, sample_rate: 1 };
    let pooled = ad.shared_pool(&x).unwrap().values;
    let oracle = Mat::from_fn(2, 3, |t, c| (rows.get(2 * t, c) + rows.get(2 * t + 1, c)) / 2.0);
    assert_eq!(pooled, oracle);
    let (_, cache) = ad.forward(&x).unwrap();
    assert_eq!(cache.pooled(), &oracle);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn encoder_output_length_matches_conv_law(mult in 1.0f64..10.0, seed in any::<u64>()) {
        let cfg = EncoderConfig { n_transformer_layers: 1, model_dim: 8, n_heads: 2, ffn_dim: 8, conv: ConvSpec {
            layers: ConvSpec::toy().layers.iter().map(|l| ConvLayer { channels: 4, ..*l }).collect(),
        }};
        let n = (cfg.conv.receptive_field() as f64 * mult) as usize;
        let enc = SpeechEncoder::<f64>::new(&cfg, &mut Init::new(seed)).unwrap();
        let wave: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) % 97) as f64 / 97.0 - 0.5).collect();
        let h = enc.encode(&wave, 2000).unwrap();
        prop_assert_eq!(h.len(), conv_output_length(n, &cfg.conv).unwrap());
        prop_assert!(h.values.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adapter_attention_rows_sum_to_one(t in 2usize..60, seed in any::<u64>()) {
        let cfg = AdapterConfig { n_heads: 2, in_dim: 4, out_dim: 4, ..AdapterConfig::default() };
        let ad = Adapter::<f64>::new(&cfg, &mut Init::new(seed)).unwrap();
        let x = FeatureSequence { values: Mat::from_fn(t, 4, |r, c| ((r * 4 + c) as f64 * 0.7 + seed as f64).sin() * 3.0), frame_stride_samples: 1, sample_rate: 1 };
        let (_, cache) = ad.forward(&x).unwrap();
        prop_assert_eq!(cache.pooled(), &ad.shared_pool(&x).unwrap().values);
        for p in cache.attn().probs() {
            for r in 0..p.rows() {
                prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
