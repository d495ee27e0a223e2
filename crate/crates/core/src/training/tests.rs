use std::cell::Cell;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::dsp::FeatureSource;
use crate::models::{build_dilated_cnn, build_session_lstm, DilatedCnnConfig, SessionLstmConfig};

fn small_cnn() -> DilatedCnnConfig {
    DilatedCnnConfig {
        input_channels: 4,
        input_delay_bins: 11,
        parallel_filters: 2,
        c5_filters: 3,
        c6_filters: 2,
        c6_kernel: 3,
        d1_units: 6,
        d2_units: 4,
        dropout: 0.1,
        ..DilatedCnnConfig::tv()
    }
}

/// Class-dependent bump along the delay axis plus noise.
fn separable_inputs(cfg: &DilatedCnnConfig, per_class: usize, seed: u64) -> Vec<LabeledInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (cfg.input_channels, cfg.input_delay_bins);
    let mut out = Vec::new();
    for _ in 0..per_class {
        for class in SeverityClass::ALL {
            let peak = 2 + 3 * class.index();
            let values = (0..rows * cols)
                .map(|i| {
                    let d = i % cols;
                    let bump = if d.abs_diff(peak) <= 1 { 2.0 } else { -0.3 };
                    bump + rng.gen_range(-0.3..0.3)
                })
                .collect();
            out.push(LabeledInput { values, class });
        }
    }
    out
}

fn fast(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        schedule: LrSchedule::Constant { rate: 1e-2 },
        batch_size: 8,
        ..cfg
    }
}

#[test]
fn class_weights_from_counts() {
    let w = compute_class_weights([560, 2259, 2398]).unwrap();
    // N = 5217; N / (3 N_c) computed independently.
    for (got, want) in w.iter().zip([5217.0 / 1680.0, 5217.0 / 6777.0, 5217.0 / 7194.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in w.iter().zip([3.105, 0.770, 0.725]) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
    assert_eq!(compute_class_weights([1, 1, 4]).unwrap(), [2.0, 2.0, 0.5]);
    assert_eq!(compute_class_weights([7, 7, 7]).unwrap(), [1.0, 1.0, 1.0]);
    assert!(matches!(compute_class_weights([3, 0, 1]), Err(Error::Argument(_))));
}

#[test]
fn lstm_schedule_values() {
    let expect = |e: usize, r: f64| assert_eq!(lstm_lr_schedule(e), r, "epoch {e}");
    for e in 1..=10 {
        expect(e, 2e-4);
    }
    for e in 11..=20 {
        expect(e, 1e-4);
    }
    for e in 21..=30 {
        expect(e, 5e-5);
    }
    for e in 31..=40 {
        expect(e, 2.5e-5);
    }
    for e in [41, 50, 51, 300, 10_000] {
        expect(e, 2e-5);
    }
}

proptest! {
    #[test]
    fn lstm_schedule_is_monotone_and_floored(e in 1usize..5000) {
        let (a, b) = (lstm_lr_schedule(e), lstm_lr_schedule(e + 1));
        prop_assert!(b <= a);
        prop_assert!(b >= 2e-5);
    }
}

#[test]
fn config_validation_lists_problems() {
    assert!(TrainConfig::segment().validate().is_ok());
    assert!(TrainConfig::session().validate().is_ok());
    let bad = TrainConfig {
        patience: 300,
        batch_size: 0,
        class_weights: ClassWeights::Fixed([1.0, -1.0, 1.0]),
        ..TrainConfig::segment()
    };
    match bad.validate() {
        Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn config_text_round_trip() {
    let cfg = TrainConfig {
        class_weights: ClassWeights::Fixed([1.5, 1.0, 0.5]),
        precision: Precision::Double,
        ..TrainConfig::session()
    };
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
    let parsed: TrainConfig = toml::from_str("class_weights = \"auto\"\nprecision = 64\nseed = 9").unwrap();
    assert_eq!(parsed.class_weights, ClassWeights::Auto);
    assert_eq!(parsed.precision, Precision::Double);
    assert_eq!(parsed.max_epochs, 300);
    assert!(toml::from_str::<TrainConfig>("precision = 16").is_err());
    assert!(toml::from_str::<TrainConfig>("class_weights = \"balanced\"").is_err());
    assert_eq!("32".parse::<Precision>().unwrap(), Precision::Single);
    assert!("half".parse::<Precision>().is_err());
}

#[test]
fn batches_fold_short_tail() {
    let order: Vec<usize> = (0..9).collect();
    let b = make_batches(&order, 4, 2);
    assert_eq!(b, vec![&order[0..4], &order[4..9]]);
    let b = make_batches(&order, 4, 1);
    assert_eq!(b.len(), 3);
    let b = make_batches(&order, 1, 2);
    assert!(b.iter().all(|x| x.len() >= 2));
    assert_eq!(b.iter().map(|x| x.len()).sum::<usize>(), 9);
}

proptest! {
    #[test]
    fn batches_partition_the_order(n in 1usize..300, size in 1usize..130, min in 1usize..3) {
        let order: Vec<usize> = (0..n).rev().collect();
        let batches = make_batches(&order, size, min);
        let flat: Vec<usize> = batches.concat();
        prop_assert_eq!(&flat, &order);
        if n >= min {
            prop_assert!(batches.iter().all(|b| b.len() >= min));
        }
    }
}

#[test]
fn weighted_ce_matches_graph_and_unweighted() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<Vec<f64>> = (0..7).map(|_| (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let targets: Vec<usize> = (0..7).map(|i| i % 3).collect();
    let unweighted: f64 = logits
        .iter()
        .zip(&targets)
        .map(|(z, &y)| -(z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln())
        .sum::<f64>()
        / 7.0;
    let ours = weighted_cross_entropy(&logits, &targets, &[1.0; 3]).unwrap();
    assert!((ours - unweighted).abs() < 1e-9);

    let w = [0.4, 1.7, 2.2];
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(&[7, 3], logits.concat()).unwrap());
    let row_w: Vec<f64> = targets.iter().map(|&t| w[t]).collect();
    let loss = g.softmax_cross_entropy(x, &targets, &row_w).unwrap();
    let ours = weighted_cross_entropy(&logits, &targets, &w).unwrap();
    assert!((g.value(loss).data()[0] - ours).abs() < 1e-12);
}

/// One scalar parameter; validation losses come from a fixed script.
struct ScriptedTask {
    store: ParamStore<f64>,
    losses: Vec<f64>,
    calls: Cell<usize>,
}

impl ScriptedTask {
    fn new(losses: Vec<f64>) -> Self {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(&[1], vec![0.0]).unwrap(), 0.0);
        Self {
            store,
            losses,
            calls: Cell::new(0),
        }
    }
}

impl TrainTask<f64> for ScriptedTask {
    fn store(&self) -> &ParamStore<f64> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
    fn train_len(&self) -> usize {
        4
    }
    fn min_batch(&self) -> usize {
        1
    }
    fn batch_loss(
        &self,
        g: &mut Graph<f64>,
        _batch: &[usize],
        _weights: &[f64; 3],
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<BnUpdate<f64>>)> {
        let id = self.store.find("w").unwrap();
        let w = g.param(&self.store, id);
        let one = g.constant(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let s = g.add(w, one)?;
        Ok((g.sum_all(s), Vec::new()))
    }
    fn validation_logits(&self) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        // Logits (0, 0, -x) with target 2 give loss ln(2 e^x + 1), monotone in x.
        let i = self.calls.get();
        self.calls.set(i + 1);
        let target = self.losses[i];
        let x = ((target.exp() - 1.0) / 2.0).ln();
        Ok((vec![vec![0.0, 0.0, -x]], vec![2]))
    }
}

#[test]
fn worsening_validation_stops_at_sixteen() {
    let losses: Vec<f64> = (0..300).map(|e| 1.0 + 0.01 * e as f64).collect();
    let mut task = ScriptedTask::new(losses);
    let cfg = TrainConfig {
        batch_size: 2,
        ..TrainConfig::segment()
    };
    let out = fit(&mut task, &cfg, [1.0; 3]).unwrap();
    assert_eq!(out.history.epochs.len(), 16);
    assert_eq!(out.history.best_epoch, 1);
    assert!(out.history.stopped_early);
    // Restored to the parameters after epoch 1: one Adam step of size lr per batch.
    let w = task.store.value(task.store.find("w").unwrap()).data()[0];
    assert!((w + 2.0 * 2e-5).abs() < 1e-9, "{w}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn best_epoch_has_minimum_validation_loss(losses in prop::collection::vec(0.1f64..3.0, 40)) {
        let mut task = ScriptedTask::new(losses);
        let cfg = TrainConfig { max_epochs: 40, patience: 5, ..TrainConfig::segment() };
        let h = fit(&mut task, &cfg, [1.0; 3]).unwrap().history;
        let min = h.epochs.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(h.best().unwrap().val_loss, min);
        prop_assert!(h.epochs.len() <= 40);
        let first = h.epochs.iter().position(|r| r.val_loss == min).unwrap();
        prop_assert_eq!(h.best_epoch, first + 1);
    }
}

#[test]
fn segment_training_is_deterministic_and_restores_best() {
    let cfg_model = small_cnn();
    let train = separable_inputs(&cfg_model, 4, 1);
    let val = separable_inputs(&cfg_model, 2, 2);
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 4,
        seed: 5,
        ..fast(TrainConfig::segment())
    };
    let run = || {
        let mut m = build_dilated_cnn::<f64>(&cfg_model, 11).unwrap();
        let out = train_segment_model(&mut m, &train, &val, &cfg).unwrap();
        (m, out)
    };
    let (m1, o1) = run();
    let (m2, o2) = run();
    assert_eq!(o1.history, o2.history);
    assert_eq!(m1.store.to_named_arrays(), m2.store.to_named_arrays());
    let best = o1.history.best().unwrap();
    let (logits, targets) = segment_logits(&m1, &val, 64).unwrap();
    let again = weighted_cross_entropy(&logits, &targets, &o1.history.class_weights).unwrap();
    assert!((again - best.val_loss).abs() < 1e-12);
    assert!(o1.history.learning_rates().iter().all(|&r| r == 1e-2));
}

#[test]
fn small_cnn_overfits_separable_data() {
    let cfg_model = DilatedCnnConfig {
        dropout: 0.0,
        ..small_cnn()
    };
    let train = separable_inputs(&cfg_model, 6, 4);
    let mut m = build_dilated_cnn::<f32>(&cfg_model, 2).unwrap();
    let cfg = TrainConfig {
        max_epochs: 150,
        early_stopping: false,
        ..fast(TrainConfig::segment())
    };
    let out = train_segment_model(&mut m, &train, &train, &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), 150);
    assert_eq!(segment_accuracy(&m, &train).unwrap(), 1.0);
}

#[test]
fn empty_or_misshapen_sets_are_rejected() {
    let cfg_model = small_cnn();
    let data = separable_inputs(&cfg_model, 1, 0);
    let mut m = build_dilated_cnn::<f64>(&cfg_model, 0).unwrap();
    let cfg = TrainConfig::segment();
    assert!(matches!(train_segment_model(&mut m, &[], &data, &cfg), Err(Error::Argument(_))));
    assert!(matches!(train_segment_model(&mut m, &data, &[], &cfg), Err(Error::Argument(_))));
    let bad = vec![LabeledInput {
        values: vec![0.0; 5],
        class: SeverityClass::Normal,
    }];
    assert!(matches!(train_segment_model(&mut m, &bad, &data, &cfg), Err(Error::Shape(_))));
}

fn sequences(width: usize, n: usize, seed: u64) -> Vec<SessionSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = SeverityClass::ALL[i % 3];
            let len = rng.gen_range(1..6);
            SessionSequence {
                session_id: format!("s{i}"),
                embeddings: (0..len)
                    .map(|_| (0..width).map(|k| if k % 3 == class.index() { 1.0 } else { 0.0 } + rng.gen_range(-0.1..0.1)).collect())
                    .collect(),
                class,
            }
        })
        .collect()
}

fn small_lstm(width: usize) -> SessionLstmConfig {
    SessionLstmConfig {
        input_size: width,
        lstm1_units: 5,
        lstm2_units: 4,
        d3_units: 4,
        ..SessionLstmConfig::tv()
    }
}

#[test]
fn session_training_follows_schedule() {
    let train = sequences(6, 9, 1);
    let val = sequences(6, 6, 2);
    let mut m = build_session_lstm::<f64>(&small_lstm(6), 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 25,
        early_stopping: false,
        batch_size: 4,
        ..TrainConfig::session()
    };
    let out = train_session_model(&mut m, &train, &val, &cfg).unwrap();
    let lrs = out.history.learning_rates();
    assert_eq!(lrs.len(), 25);
    for (e, r) in lrs.iter().enumerate() {
        assert_eq!(*r, lstm_lr_schedule(e + 1));
    }
}

#[test]
fn session_training_edge_cases() {
    let val = sequences(6, 3, 2);
    let mut m = build_session_lstm::<f64>(&small_lstm(6), 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        patience: 2,
        class_weights: ClassWeights::Fixed([1.0; 3]),
        ..TrainConfig::session()
    };
    let single = sequences(6, 1, 1);
    assert_eq!(train_session_model(&mut m, &single, &val, &cfg).unwrap().history.epochs.len(), 3);
    let wide = sequences(7, 3, 1);
    assert!(matches!(train_session_model(&mut m, &wide, &val, &cfg), Err(Error::Shape(_))));
}

fn session_acfs(cfg: &DilatedCnnConfig, counts: &[usize]) -> Vec<SessionAcfs> {
    let m = (cfg.input_channels as f64).sqrt() as usize;
    counts
        .iter()
        .enumerate()
        .map(|(s, &n)| SessionAcfs {
            session_id: format!("sess{s}"),
            segments: separable_inputs(cfg, n, s as u64)
                .into_iter()
                .take(n)
                .map(|x| AcfMatrix {
                    values: x.values,
                    channels: m,
                    max_delay: cfg.input_delay_bins - 1,
                    frame_rate_hz: 100.0,
                    source: FeatureSource::Synthetic,
                })
                .collect(),
        })
        .collect()
}

#[test]
fn embedding_export_contract() {
    let cfg = small_cnn();
    let model = build_dilated_cnn::<f64>(&cfg, 1).unwrap();
    let sessions = session_acfs(&cfg, &[4, 0, 2]);
    let std = crate::acf::fit_acf_standardizer(&sessions[0].segments).unwrap();
    let a = export_embeddings(&model, &std, &sessions).unwrap();
    let b = export_embeddings(&model, &std, &sessions).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].session_id, "sess0");
    assert_eq!(a[0].embeddings.len(), 4);
    assert!(a[0].embeddings.iter().all(|e| e.len() == cfg.d1_units));
    // Order follows the segment order: embedding k equals the single-segment export of segment k.
    for k in 0..4 {
        let one = SessionAcfs {
            session_id: "x".into(),
            segments: vec![sessions[0].segments[k].clone()],
        };
        let e = export_embeddings(&model, &std, &[one]).unwrap();
        assert_eq!(e[0].embeddings[0], a[0].embeddings[k]);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    save_embeddings(&path, &a).unwrap();
    assert_eq!(load_embeddings(&path).unwrap(), a);
}

fn full_checkpoint() -> Checkpoint {
    let cfg = small_cnn();
    let train = separable_inputs(&cfg, 2, 1);
    let mut m = build_dilated_cnn::<f32>(&cfg, 4).unwrap();
    let tc = TrainConfig {
        max_epochs: 2,
        patience: 1,
        ..fast(TrainConfig::segment())
    };
    let out = train_segment_model(&mut m, &train, &train, &tc).unwrap();
    let mut ck = Checkpoint::new(ModelKind::DilatedCnn, &cfg, &m.store, 4).unwrap();
    ck.adam = Some(AdamSnapshot::capture(&m.store, &out.adam));
    ck.history = Some(out.history);
    let acfs = session_acfs(&cfg, &[3]);
    ck.standardizer = Some(crate::acf::fit_acf_standardizer(&acfs[0].segments).unwrap());
    ck.info = serde_json::json!({"source": "synthetic", "max_delay": 10});
    ck
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let ck = full_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.precision, Precision::Single);
    let bits = |c: &Checkpoint| -> Vec<u64> { c.params.iter().flat_map(|a| a.data.iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&back), bits(&ck));
    // Saving the loaded checkpoint reproduces the file byte for byte.
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let model = back.dilated_cnn::<f32>().unwrap();
    assert_eq!(model.store.to_named_arrays(), ck.params.iter().map(|a| (a.name.clone(), a.shape.clone(), a.data.clone())).collect::<Vec<_>>());
    assert!(matches!(back.session_lstm::<f32>(), Err(Error::Format(_))));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ck = full_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Integrity(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let flip = dir.path().join("flip.ckpt");
    std::fs::write(&flip, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&flip), Err(Error::Integrity(_))));

    let mut versioned = bytes;
    versioned[8..12].copy_from_slice(&999u32.to_le_bytes());
    let ver = dir.path().join("ver.ckpt");
    std::fs::write(&ver, &versioned).unwrap();
    assert!(matches!(load_checkpoint(&ver), Err(Error::Version { found: 999, .. })));
}
