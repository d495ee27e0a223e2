//! Finite-difference gradient checks over every layer type and the full
//! dilated CNN, at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    dense, gradient_check, Activation, Conv2dSpec, GradCheckReport, Graph, LstmLayer, Mode, Padding, ParamId,
    ParamStore, Tensor, Var,
};
use crate::error::Result;
use crate::models::{batch_input, build_dilated_cnn, DilatedCnn, DilatedCnnConfig, SegmentModel};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const EPSILON: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Reduces an output to a scalar through fixed random weights so every
/// element receives a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum_all(p))
}

fn check<F>(name: &str, store: &mut ParamStore<f64>, tolerance: f64, f: F) -> Result<CheckOutcome>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    Ok(CheckOutcome {
        name: name.to_string(),
        report: gradient_check(store, f, EPSILON, tolerance)?,
    })
}

fn conv_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let cases = [
        ("conv2d dilated (15,1) d=3", (2, 15, 1), Conv2dSpec { stride: (1, 1), dilation: (3, 1), padding: Padding::Same }),
        ("conv2d strided (3,1) s=2", (3, 3, 1), Conv2dSpec { stride: (2, 1), dilation: (1, 1), padding: Padding::Same }),
        ("conv2d valid (4,1)", (2, 4, 1), Conv2dSpec { stride: (1, 1), dilation: (1, 1), padding: Padding::Valid }),
    ];
    for (name, (o, kh, kw), spec) in cases {
        let mut store = ParamStore::new();
        let x = store.add("x", random(rng, &[2, 3, 17, 1]), 0.0);
        let k = store.add("kernel", random(rng, &[o, 3, kh, kw]), 0.0);
        out.push(check(name, &mut store, LAYER_TOLERANCE, |g, s| {
            let (xv, kv) = (g.param(s, x), g.param(s, k));
            let y = g.conv2d(xv, kv, spec)?;
            probe(g, y, 2)
        })?);
    }
    Ok(())
}

fn dense_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut store = ParamStore::new();
    let x = store.add("x", random(rng, &[4, 5]), 0.0);
    let w = store.add("w", random(rng, &[5, 3]), 0.0);
    let b = store.add("b", random(rng, &[3]), 0.0);
    for (name, act) in [("dense linear", Activation::None), ("dense relu", Activation::Relu), ("dense leaky relu", Activation::LeakyRelu)] {
        out.push(check(name, &mut store, LAYER_TOLERANCE, |g, s| {
            let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let y = dense(g, xv, wv, bv, act)?;
            probe(g, y, 1)
        })?);
    }
    Ok(())
}

fn batch_norm_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut store = ParamStore::new();
    let x = store.add("x", random(rng, &[3, 2, 5, 1]), 0.0);
    let gamma = store.add("gamma", random(rng, &[2]), 0.0);
    let beta = store.add("beta", random(rng, &[2]), 0.0);
    out.push(check("batch norm (training)", &mut store, LAYER_TOLERANCE, |g, s| {
        let (xv, gv, bv) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
        let (y, _) = g.batch_norm_train(xv, gv, bv, 1e-5)?;
        probe(g, y, 3)
    })?);
    out.push(check("batch norm (inference)", &mut store, LAYER_TOLERANCE, |g, s| {
        let (xv, gv, bv) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
        let y = g.batch_norm_eval(xv, gv, bv, &[0.2, -0.1], &[1.5, 0.7], 1e-5)?;
        probe(g, y, 3)
    })?);
    Ok(())
}

fn pool_check(rng: &mut ChaCha8Rng, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut store = ParamStore::new();
    let x = store.add("x", random(rng, &[2, 2, 9, 2]), 0.0);
    out.push(check("max pool", &mut store, LAYER_TOLERANCE, |g, s| {
        let xv = g.param(s, x);
        let p = g.max_pool(xv, (2, 2))?;
        probe(g, p, 4)
    })?);
    Ok(())
}

fn lstm_check(rng: &mut ChaCha8Rng, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut store = ParamStore::new();
    let layer = LstmLayer::new(&mut store, "lstm", 3, 4, rng);
    let seq: Vec<ParamId> = (0..5).map(|t| store.add(format!("x{t}"), random(rng, &[2, 3]), 0.0)).collect();
    let masks = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]];
    out.push(check("lstm (masked, recurrent dropout)", &mut store, LAYER_TOLERANCE, |g, s| {
        let xs: Vec<Var> = seq.iter().map(|&id| g.param(s, id)).collect();
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let hs = layer.forward(g, s, &xs, Some(&masks), 0.3, true, Mode::Train, &mut mask_rng)?;
        probe(g, *hs.last().expect("non-empty"), 5)
    })?);
    Ok(())
}

fn cross_entropy_check(rng: &mut ChaCha8Rng, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut store = ParamStore::new();
    let z = store.add("logits", random(rng, &[4, 3]), 0.0);
    out.push(check("weighted softmax cross-entropy", &mut store, LAYER_TOLERANCE, |g, s| {
        let zv = g.param(s, z);
        g.softmax_cross_entropy(zv, &[0, 2, 1, 2], &[3.1, 0.7, 0.77, 0.7])
    })?);
    Ok(())
}

fn full_model_check(rng: &mut ChaCha8Rng, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let cfg = DilatedCnnConfig {
        input_channels: 4,
        input_delay_bins: 11,
        parallel_filters: 2,
        c5_filters: 3,
        c6_filters: 2,
        c6_kernel: 3,
        d1_units: 4,
        d2_units: 3,
        ..DilatedCnnConfig::tv()
    };
    let model = build_dilated_cnn::<f64>(&cfg, rng.gen())?;
    let mut store = model.store.clone();
    // Zero biases leave dropped or inactive ReLU units exactly on the kink,
    // where central differences are meaningless.
    for name in ["d1.bias", "d2.bias", "out.bias"] {
        if let Some(id) = store.find(name) {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.3));
        }
    }
    let per = cfg.input_channels * cfg.input_delay_bins;
    let samples: Vec<Vec<f64>> = (0..3).map(|_| (0..per).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let dropout_seed: u64 = rng.gen();
    out.push(check("dilated CNN (full composition)", &mut store, MODEL_TOLERANCE, |g, s| {
        let m = DilatedCnn {
            store: s.clone(),
            ..model.clone()
        };
        let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
        let x = batch_input(g, m.input_shape(), &refs)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let f = m.forward(g, x, Mode::Train, &mut drop_rng)?;
        g.softmax_cross_entropy(f.logits, &[0, 2, 1], &[1.5, 0.7, 1.0])
    })?);
    Ok(())
}

/// Runs every check; layer checks use [`LAYER_TOLERANCE`], the full model
/// [`MODEL_TOLERANCE`].
pub fn gradient_check_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    conv_checks(&mut rng, &mut out)?;
    dense_checks(&mut rng, &mut out)?;
    batch_norm_checks(&mut rng, &mut out)?;
    pool_check(&mut rng, &mut out)?;
    lstm_check(&mut rng, &mut out)?;
    cross_entropy_check(&mut rng, &mut out)?;
    full_model_check(&mut rng, &mut out)?;
    Ok(out)
}
