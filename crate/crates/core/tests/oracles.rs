//! Equivalence of the im2col/GEMM convolution engine against naive
//! direct-convolution oracles, in both precisions.
//!
//! Tolerances: the engine and the oracle sum identical products in
//! different orders, so `f64`-vs-`f64` disagreement is pure rounding
//! (≤ 1e-10 here) and `f32`-engine-vs-`f64`-oracle disagreement is the
//! engine's own single-precision accumulation (≤ 1e-5 on 8x8 inputs).

mod common;

use common::*;
use deepsteg::net::{Activation, AggLayer, Conv2d, ConvStack, NetworkSpec, StegoModel};
use ndarray::{Array1, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const F32_TOL: f64 = 1e-5;
const F64_TOL: f64 = 1e-10;

fn random_conv(oc: usize, k: usize, ic: usize, rng: &mut ChaCha8Rng) -> Conv2d<f32> {
    Conv2d {
        weight: Array4::from_shape_fn((oc, k, k, ic), |_| rng.random_range(-0.3f32..0.3)),
        bias: Array1::from_shape_fn(oc, |_| rng.random_range(-0.1f32..0.1)),
    }
}

fn conv_to_f64(c: &Conv2d<f32>) -> Conv2d<f64> {
    Conv2d { weight: c.weight.mapv(f64::from), bias: c.bias.mapv(f64::from) }
}

fn layer_to_f64(l: &AggLayer<f32>) -> AggLayer<f64> {
    AggLayer { branches: l.branches.iter().map(conv_to_f64).collect(), activation: l.activation }
}

fn stack_to_f64(s: &ConvStack<f32>) -> ConvStack<f64> {
    ConvStack { layers: s.layers.iter().map(layer_to_f64).collect() }
}

/// Run one layer through the engine (both precisions) and the oracle;
/// assert agreement.
fn check_layer(layer: AggLayer<f32>, input: Array4<f32>) {
    let layer64 = layer_to_f64(&layer);
    let input64 = to_f64(input.view());

    let oracle = agg_layer_direct(input64.view(), &layer64);

    let engine32 = ConvStack { layers: vec![layer] }.forward(input.view()).unwrap();
    let diff32 = max_abs_diff(to_f64(engine32.view()).view(), oracle.view());
    assert!(diff32 <= F32_TOL, "f32 engine vs oracle: {diff32:e}");

    let engine64 = ConvStack { layers: vec![layer64] }.forward(input64.view()).unwrap();
    let diff64 = max_abs_diff(engine64.view(), oracle.view());
    assert!(diff64 <= F64_TOL, "f64 engine vs oracle: {diff64:e}");
}

#[test]
fn single_kernels_match_direct_convolution() {
    // Odd and even kernels; even ones exercise the asymmetric padding
    // (one row/column before, two after for 4x4).
    for (i, k) in [1usize, 2, 3, 4, 5].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let conv = random_conv(7, k, 3, &mut rng);
        let input = Array4::from_shape_fn((2, 8, 8, 3), |_| rng.random_range(-1.0f32..1.0));
        check_layer(AggLayer { branches: vec![conv], activation: Activation::Relu }, input);
    }
}

#[test]
fn aggregated_345_layer_matches_direct_convolution() {
    for (seed, activation) in [(7u64, Activation::Relu), (8, Activation::Linear)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches = vec![
            random_conv(5, 3, 4, &mut rng),
            random_conv(3, 4, 4, &mut rng),
            random_conv(2, 5, 4, &mut rng),
        ];
        let input = Array4::from_shape_fn((3, 8, 8, 4), |_| rng.random_range(-1.0f32..1.0));
        check_layer(AggLayer { branches, activation }, input);
    }
}

#[test]
fn deep_stack_matches_direct_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut layer = |ic: usize, oc_each: usize, activation| AggLayer {
        branches: vec![
            random_conv(oc_each, 3, ic, &mut rng),
            random_conv(oc_each, 4, ic, &mut rng),
            random_conv(oc_each, 5, ic, &mut rng),
        ],
        activation,
    };
    let stack = ConvStack {
        layers: vec![
            layer(3, 4, Activation::Relu),
            layer(12, 4, Activation::Relu),
            layer(12, 2, Activation::Linear),
        ],
    };
    let stack64 = stack_to_f64(&stack);
    let input = Array4::from_shape_fn((2, 8, 8, 3), |_| rng.random_range(0.0f32..1.0));
    let input64 = to_f64(input.view());

    let oracle = stack_direct(input64.view(), &stack64);
    let engine32 = stack.forward(input.view()).unwrap();
    let engine64 = stack64.forward(input64.view()).unwrap();

    assert!(max_abs_diff(to_f64(engine32.view()).view(), oracle.view()) <= F32_TOL);
    assert!(max_abs_diff(engine64.view(), oracle.view()) <= F64_TOL);
}

#[test]
fn prep_forward_matches_oracle() {
    let model: StegoModel<f32> = StegoModel::init(&NetworkSpec::new(2), 42);
    let model64 = model.cast::<f64>();
    let batch = random_batch_f32(2, 2, 8, 8, 7);
    let batch64 = batch_to_f64(&batch);

    for i in 0..2 {
        let oracle = stack_direct(batch64.secrets[i].view(), &model64.preps[i]);
        let p32 = model.prep_forward(i, batch.secrets[i].view()).unwrap();
        let p64 = model64.prep_forward(i, batch64.secrets[i].view()).unwrap();
        assert!(max_abs_diff(to_f64(p32.view()).view(), oracle.view()) <= F32_TOL);
        assert!(max_abs_diff(p64.view(), oracle.view()) <= F64_TOL);
    }
}

#[test]
fn encode_forward_matches_oracle() {
    let model: StegoModel<f32> = StegoModel::init(&NetworkSpec::new(2), 42);
    let model64 = model.cast::<f64>();
    let batch = random_batch_f32(2, 2, 8, 8, 7);
    let batch64 = batch_to_f64(&batch);

    let oracle = encode_direct(&model64, batch64.cover.view(), &batch64.secrets);
    let c32 = model.encode_forward(&batch).unwrap();
    let c64 = model64.encode_forward(&batch64).unwrap();
    assert_eq!(c32.dim(), batch.cover.dim(), "container matches cover shape");
    assert!(max_abs_diff(to_f64(c32.view()).view(), oracle.view()) <= F32_TOL);
    assert!(max_abs_diff(c64.view(), oracle.view()) <= F64_TOL);
}

#[test]
fn reveal_forward_matches_oracle() {
    let model: StegoModel<f32> = StegoModel::init(&NetworkSpec::new(2), 42);
    let model64 = model.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let container = Array4::from_shape_fn((2, 8, 8, 3), |_| rng.random_range(0.0f32..1.0));
    let container64 = to_f64(container.view());

    for i in 0..2 {
        let oracle = reveal_direct(&model64, i, container64.view());
        let r32 = model.reveal_forward(i, container.view()).unwrap();
        let r64 = model64.reveal_forward(i, container64.view()).unwrap();
        assert_eq!(r32.dim(), container.dim(), "decoded secret matches container shape");
        assert!(max_abs_diff(to_f64(r32.view()).view(), oracle.view()) <= F32_TOL);
        assert!(max_abs_diff(r64.view(), oracle.view()) <= F64_TOL);
    }
}

#[test]
fn training_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut tensor = || Array4::from_shape_fn((3, 8, 8, 3), |_| rng.random_range(0.0f64..1.0));
    let (container, cover) = (tensor(), tensor());
    let decoded = vec![tensor(), tensor()];
    let secrets = vec![tensor(), tensor()];

    let report = deepsteg::train::full_loss(
        container.view(),
        cover.view(),
        &decoded,
        &secrets,
        0.75,
        1.25,
    )
    .unwrap();
    let oracle = loss_direct(container.view(), cover.view(), &decoded, &secrets, 0.75, 1.25);
    assert!((report.total - oracle).abs() / oracle <= 1e-12);
    assert!((report.total - (report.cover_term + report.secret_terms.iter().sum::<f64>())).abs() < 1e-9);
}

#[test]
fn stack_rejects_wrong_channel_count() {
    let model: StegoModel<f32> = StegoModel::init(&NetworkSpec::new(1), 1);
    let bad = Array4::<f32>::zeros((1, 8, 8, 4));
    assert!(model.reveal_forward(0, bad.view()).is_err());
}
