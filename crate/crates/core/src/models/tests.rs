use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradient_check;
use crate::dsp::FeatureSource;

fn random_acf(cfg: &DilatedCnnConfig, seed: u64) -> AcfMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = (cfg.input_channels as f64).sqrt() as usize;
    AcfMatrix {
        values: (0..cfg.input_channels * cfg.input_delay_bins)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect(),
        channels: m,
        max_delay: cfg.input_delay_bins - 1,
        frame_rate_hz: 100.0,
        source: FeatureSource::Synthetic,
    }
}

fn small_cnn() -> DilatedCnnConfig {
    DilatedCnnConfig {
        input_channels: 4,
        input_delay_bins: 11,
        parallel_filters: 2,
        c5_filters: 3,
        c6_filters: 2,
        c6_kernel: 3,
        d1_units: 4,
        d2_units: 3,
        ..DilatedCnnConfig::tv()
    }
}

#[test]
fn table_configurations_build() {
    let tv = build_dilated_cnn::<f32>(&DilatedCnnConfig::tv(), 1).unwrap();
    assert_eq!(tv.config.input_channels, 64);
    assert_eq!(tv.config.flatten_width().unwrap(), 184);
    assert_eq!(tv.config.heights().unwrap(), (26, 23));
    assert_eq!(tv.parallel.len(), 4);
    let rates: Vec<usize> = tv.parallel.iter().map(|b| b.spec.dilation.0).collect();
    assert_eq!(rates, vec![1, 3, 7, 15]);
    assert!(tv.config.in_search_grid());

    let mfcc = build_dilated_cnn::<f32>(&DilatedCnnConfig::mfcc(), 1).unwrap();
    assert_eq!(mfcc.config.input_channels, 144);
    assert_eq!(mfcc.config.flatten_width().unwrap(), 384);

    let formant = build_dilated_cnn::<f32>(&DilatedCnnConfig::formant(), 1).unwrap();
    assert_eq!(formant.config.input_channels, 9);
    assert_eq!(formant.config.dropout, 0.4);

    for cfg in [SessionLstmConfig::tv(), SessionLstmConfig::mfcc(), SessionLstmConfig::formant()] {
        build_session_lstm::<f32>(&cfg, 1).unwrap();
    }
    let tv_lstm = SessionLstmConfig::tv();
    assert_eq!((tv_lstm.lstm1_units, tv_lstm.lstm2_units, tv_lstm.d3_units), (64, 64, 32));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = DilatedCnnConfig::tv();
    cfg.dilation_rates = vec![1, 2, 4, 8];
    assert!(build_dilated_cnn::<f32>(&cfg, 0).is_err());
    let mut cfg = DilatedCnnConfig::tv();
    cfg.input_delay_bins = 5;
    assert!(matches!(build_dilated_cnn::<f32>(&cfg, 0), Err(crate::Error::Shape(_))));
    let mut cfg = DilatedCnnConfig::tv();
    cfg.dropout = 1.0;
    assert!(build_dilated_cnn::<f32>(&cfg, 0).is_err());
    let mut cfg = BaselineCnnConfig::default();
    cfg.input_frames = 50;
    assert!(build_baseline_cnn::<f32>(&cfg, 0).is_err());
}

#[test]
fn parameter_counts_match_closed_form() {
    // TV row by hand: C1–C4 4·16·64·15 + 4·2·16, C5 16·64·3 + 32, C6 8·16·4 + 16,
    // D1 184·64 + 64, D2 64·16 + 16, out 16·3 + 3.
    let hand = 61_440 + 128 + 3_072 + 32 + 512 + 16 + 11_840 + 1_040 + 51;
    assert_eq!(DilatedCnnConfig::tv().parameter_count().unwrap(), hand);
    for cfg in [DilatedCnnConfig::tv(), DilatedCnnConfig::mfcc(), DilatedCnnConfig::formant()] {
        let built = build_dilated_cnn::<f32>(&cfg, 3).unwrap();
        assert_eq!(built.store.trainable_count(), cfg.parameter_count().unwrap());
    }
    let base = BaselineCnnConfig::default();
    assert_eq!(base.pooled_frames(), (125, 15));
    assert_eq!(base.flatten_width(), 1920);
    assert_eq!(
        build_baseline_cnn::<f32>(&base, 0).unwrap().store.trainable_count(),
        base.parameter_count()
    );
    let lstm = SessionLstmConfig::tv();
    assert_eq!(build_session_lstm::<f32>(&lstm, 0).unwrap().store.trainable_count(), lstm.parameter_count());
}

#[test]
fn initialization_is_seeded() {
    let a = build_dilated_cnn::<f64>(&DilatedCnnConfig::tv(), 7).unwrap().store.to_named_arrays();
    let b = build_dilated_cnn::<f64>(&DilatedCnnConfig::tv(), 7).unwrap().store.to_named_arrays();
    let c = build_dilated_cnn::<f64>(&DilatedCnnConfig::tv(), 8).unwrap().store.to_named_arrays();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let base = BaselineCnnConfig {
        input_channels: 3,
        input_frames: 128,
        conv1_filters: 4,
        conv2_filters: 4,
        ..Default::default()
    };
    assert_eq!(
        build_baseline_cnn::<f64>(&base, 1).unwrap().store.to_named_arrays(),
        build_baseline_cnn::<f64>(&base, 1).unwrap().store.to_named_arrays()
    );
}

#[test]
fn forward_segment_contract() {
    let model = build_dilated_cnn::<f32>(&DilatedCnnConfig::tv(), 5).unwrap();
    let acf = random_acf(&model.config, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = forward_segment(&model, &acf, Mode::Eval, &mut rng).unwrap();
    assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(p.confidence, p.probabilities.iter().copied().fold(0.0, f64::max));
    assert_eq!(p.embedding.len(), 64);
    assert_eq!(p, forward_segment(&model, &acf, Mode::Eval, &mut rng).unwrap());

    let mut wrong = acf.clone();
    wrong.values.truncate(63 * 51);
    wrong.channels = 7;
    assert!(matches!(
        forward_segment(&model, &wrong, Mode::Eval, &mut rng),
        Err(crate::Error::Shape(_))
    ));

    let batch = predict_segments(&model, &[&acf.values, &random_acf(&model.config, 2).values], 1).unwrap();
    assert_eq!(batch[0], p);
}

#[test]
fn embedding_equals_independent_d1_recomputation() {
    let model = build_dilated_cnn::<f64>(&DilatedCnnConfig::tv(), 9).unwrap();
    let acf = random_acf(&model.config, 4);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = batch_input(&mut g, model.input_shape(), &[&acf.values]).unwrap();
    let (f, flat) = model.forward_detailed(&mut g, x, Mode::Eval, &mut rng).unwrap();
    let flat = g.value(flat).data().to_vec();
    let w = model.store.value(model.d1.weights).data();
    let b = model.store.value(model.d1.bias).data();
    let units = model.config.d1_units;
    let emb = g.value(f.embedding).data();
    for u in 0..units {
        let z: f64 = b[u] + (0..flat.len()).map(|i| flat[i] * w[i * units + u]).sum::<f64>();
        assert!((z.max(0.0) - emb[u]).abs() < 1e-6);
    }
}

#[test]
fn full_dilated_cnn_gradient_check() {
    let model = build_dilated_cnn::<f64>(&small_cnn(), 11).unwrap();
    let mut store = model.store.clone();
    // Zero biases put dead or dropped-out rows exactly on a ReLU kink, where
    // finite differences are meaningless; move them off zero.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for name in ["d1.bias", "d2.bias", "out.bias"] {
        let id = store.find(name).unwrap();
        store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.3));
    }
    let samples: Vec<Vec<f64>> = (0..3).map(|s| random_acf(&model.config, 20 + s).values).collect();
    let targets = [0usize, 2, 1];
    let weights = [1.5, 0.7, 1.0];
    let report = gradient_check(
        &mut store,
        |g, store| {
            let m = DilatedCnn {
                store: store.clone(),
                ..model.clone()
            };
            let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
            let x = batch_input(g, m.input_shape(), &refs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let f = m.forward(g, x, Mode::Train, &mut rng)?;
            g.softmax_cross_entropy(f.logits, &targets, &weights)
        },
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn baseline_forward_shapes() {
    let model = build_baseline_cnn::<f32>(&BaselineCnnConfig::default(), 2).unwrap();
    let x: Vec<f64> = (0..23 * 1000).map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.5).collect();
    let p = predict_segments(&model, &[&x], 8).unwrap();
    assert_eq!(p[0].embedding.len(), 64);
    assert!((p[0].probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(predict_segments(&model, &[&x[..22 * 1000]], 8).is_err());
}

#[test]
fn session_forward_contract() {
    let cfg = SessionLstmConfig {
        input_size: 6,
        ..SessionLstmConfig::tv()
    };
    let model = build_session_lstm::<f64>(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    for len in 1..=40 {
        let p = forward_session(&model, &seq[..len]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(forward_session(&model, &seq[..5]).unwrap(), forward_session(&model, &seq[..5]).unwrap());
    assert!(matches!(forward_session(&model, &[]), Err(crate::Error::Argument(_))));
    assert!(matches!(forward_session(&model, &[vec![0.0; 5]]), Err(crate::Error::Shape(_))));

    let mut reversed = seq[..5].to_vec();
    reversed.reverse();
    let (a, b) = (forward_session(&model, &seq[..5]).unwrap(), forward_session(&model, &reversed).unwrap());
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn padded_batch_matches_individual_sessions() {
    let cfg = SessionLstmConfig {
        input_size: 3,
        lstm1_units: 5,
        lstm2_units: 4,
        d3_units: 3,
        ..SessionLstmConfig::tv()
    };
    let model = build_session_lstm::<f64>(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seqs: Vec<Vec<Vec<f64>>> = [2usize, 7, 4]
        .iter()
        .map(|&n| (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
        .collect();
    let refs: Vec<&[Vec<f64>]> = seqs.iter().map(|s| s.as_slice()).collect();
    let mut g = Graph::new();
    let logits = model.forward_batch(&mut g, &refs, Mode::Eval, &mut rng).unwrap();
    let batched = row_probabilities(&g, logits);
    for (s, p) in seqs.iter().zip(&batched) {
        let single = forward_session(&model, s).unwrap();
        for (a, b) in single.iter().zip(p) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn argmax_is_shift_invariant(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, shift in -50.0f64..50.0) {
        let probs = |z: [f64; 3]| {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            [e[0] / s, e[1] / s, e[2] / s]
        };
        let p = SegmentPrediction::from_probabilities(probs([a, b, c]), vec![]);
        let q = SegmentPrediction::from_probabilities(probs([a + shift, b + shift, c + shift]), vec![]);
        prop_assert_eq!(p.predicted, q.predicted);
    }
}
