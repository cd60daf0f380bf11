#![allow(dead_code)]

use std::collections::BTreeMap;

use gtn::data::{MtsDataset, MtsSample, SynthSpec};
use gtn::model::{forward, Gtn, Mode, ModelConfig, Variant};
use gtn::train::TrainConfig;
use gtn::{Graph, Purpose, Rng, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Small enough for finite differences over every parameter.
pub fn tiny_config(
    variant: Variant,
    n_channels: usize,
    max_len: usize,
    n_classes: usize,
) -> ModelConfig {
    let mut cfg = ModelConfig::new(n_channels, max_len, n_classes, variant);
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.d_ff = 6;
    cfg.d_tower = 3;
    cfg
}

/// Fast but still learnable on the synthetic fixture.
pub fn fixture_config(variant: Variant, ds: &MtsDataset) -> ModelConfig {
    let mut cfg = ModelConfig::new(ds.n_channels, ds.max_len, ds.n_classes, variant);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.d_ff = 32;
    cfg.d_tower = 16;
    cfg
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn toy_sample(len: usize, channels: usize, seed: u64) -> Tensor {
    random_tensor(&[len, channels], &mut Rng::new(seed, Purpose::Synth))
}

/// Fixture dataset: 2 classes, 4 channels, lengths 20..=30, 200/100 split.
pub fn fixture_dataset(seed: u64) -> MtsDataset {
    let spec = SynthSpec {
        name: "synthetic".into(),
        n_classes: 2,
        n_channels: 4,
        min_len: 20,
        max_len: 30,
        noise: 0.1,
        train_per_class: 100,
        test_per_class: 50,
    };
    gtn::data::synth_with_seed(&spec, seed).unwrap()
}

/// Tiny dataset for quick end-to-end runs.
pub fn small_dataset(seed: u64) -> MtsDataset {
    let spec = SynthSpec {
        name: "small".into(),
        n_classes: 2,
        n_channels: 3,
        min_len: 5,
        max_len: 8,
        noise: 0.1,
        train_per_class: 6,
        test_per_class: 3,
    };
    gtn::data::synth_with_seed(&spec, seed).unwrap()
}

pub fn quick_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

/// Central-difference error `|a - n| / max(|a|, |n|)`, with the
/// denominator floored so that gradients at round-off level compare
/// absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between reverse-mode gradients of
/// `sum(w ⊙ build(inputs))` and central differences, with a fixed random
/// weighting `w`.
pub fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let run = |vals: &[Tensor], weights: Option<&Tensor>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let w = match weights {
            Some(w) => w.clone(),
            None => random_tensor(g.shape(out), &mut Rng::new(99, Purpose::Init)),
        };
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss, w)
    };
    let (mut g, vars, loss, weights) = run(inputs, None);
    g.backward(loss).unwrap();
    let loss_at = |vals: &[Tensor]| {
        let (g, _, loss, _) = run(vals, Some(&weights));
        g.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (vi, input) in inputs.iter().enumerate() {
        let ad = g.grad(vars[vi]).expect("leaf grad").clone();
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[vi].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[vi].data_mut()[e] -= FD_STEP;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(ad.data()[e], fd));
        }
    }
    worst
}

fn model_loss(
    model: &Gtn,
    sample: &Tensor,
    true_len: usize,
    label: usize,
) -> (Graph, BTreeMap<String, Var>, Var) {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let out = forward(
        &mut g,
        &bound,
        &model.config,
        sample,
        true_len,
        Mode::Eval,
        &mut Rng::new(0, Purpose::Dropout),
    )
    .unwrap();
    let loss = g.cross_entropy(out.logits, &[label]).unwrap();
    let vars = bound.iter().map(|(k, v)| (k.to_string(), v)).collect();
    (g, vars, loss)
}

/// Worst relative error over every parameter scalar of the full
/// forward pass plus cross-entropy.
pub fn model_grad_check(model: &Gtn, sample: &Tensor, true_len: usize, label: usize) -> f64 {
    let (mut g, vars, loss) = model_loss(model, sample, true_len, label);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (name, var) in &vars {
        let ad = g
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(*var)));
        for e in 0..ad.numel() {
            let orig = probe.params.get(name).unwrap().data()[e];
            let mut at = |v: f64| {
                probe.params.get_mut(name).unwrap().data_mut()[e] = v;
                let (g, _, loss) = model_loss(&probe, sample, true_len, label);
                g.value(loss).data()[0]
            };
            let fd = (at(orig + FD_STEP) - at(orig - FD_STEP)) / (2.0 * FD_STEP);
            at(orig);
            let err = rel_error(ad.data()[e], fd);
            assert!(err.is_finite(), "{name}[{e}]");
            worst = worst.max(err);
        }
    }
    worst
}

/// Full `(n+1)×(m+1)` DP table, no rolling rows.
pub fn dtw_table(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![f64::INFINITY; m + 1]; n + 1];
    d[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = d[i - 1][j].min(d[i][j - 1]).min(d[i - 1][j - 1]);
            d[i][j] = (a[i - 1] - b[j - 1]).abs() + best;
        }
    }
    d[n][m]
}

/// Samples whose values are a deterministic function of the seed.
pub fn labelled(values: Tensor, label: usize) -> MtsSample {
    MtsSample::new(values, label).unwrap()
}
