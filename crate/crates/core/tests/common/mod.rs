//! Shared oracles and fixtures for the integration tests.
//!
//! Everything here is deliberately naive — direct scalar loops, own
//! padding arithmetic, `f64` accumulation — and shares no code with
//! the library's im2col/GEMM implementation, so the two sides can
//! referee each other. Keep it that way: an oracle that calls into the
//! code under test proves nothing.
#![allow(dead_code)] // not every test target uses every oracle

use std::path::Path;

use ndarray::{Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepsteg::data::StegoBatch;
use deepsteg::net::{Activation, AggLayer, ConvStack, StegoModel};

/// Direct 2-D convolution, NHWC input, `(oc, kh, kw, ic)` weights,
/// shape-preserving padding with `(k − 1) / 2` rows/columns before and
/// the remainder after. Seven explicit loops, `f64` accumulation.
pub fn conv2d_direct(
    input: ArrayView4<f64>,
    weight: ArrayView4<f64>,
    bias: ArrayView1<f64>,
    relu: bool,
) -> Array4<f64> {
    let (n, h, w, c_in) = input.dim();
    let (oc, kh, kw, ic) = weight.dim();
    assert_eq!(c_in, ic, "channel mismatch between input and weights");
    let pad_top = (kh - 1) / 2;
    let pad_left = (kw - 1) / 2;

    let mut out = Array4::<f64>::zeros((n, h, w, oc));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for o in 0..oc {
                    let mut acc = bias[o];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let sy = y as isize + dy as isize - pad_top as isize;
                            let sx = x as isize + dx as isize - pad_left as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue; // zero padding
                            }
                            for c in 0..c_in {
                                acc += input[(b, sy as usize, sx as usize, c)]
                                    * weight[(o, dy, dx, c)];
                            }
                        }
                    }
                    out[(b, y, x, o)] = if relu { acc.max(0.0) } else { acc };
                }
            }
        }
    }
    out
}

/// Aggregated layer via the direct convolution: every branch, then
/// channel concatenation, activation applied per branch.
pub fn agg_layer_direct(input: ArrayView4<f64>, layer: &AggLayer<f64>) -> Array4<f64> {
    let relu = layer.activation == Activation::Relu;
    let parts: Vec<Array4<f64>> = layer
        .branches
        .iter()
        .map(|conv| conv2d_direct(input, conv.weight.view(), conv.bias.view(), relu))
        .collect();
    let views: Vec<ArrayView4<f64>> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(3), &views).expect("branch outputs share n/h/w")
}

/// Whole-stack forward via the direct convolution.
pub fn stack_direct(input: ArrayView4<f64>, stack: &ConvStack<f64>) -> Array4<f64> {
    let mut current = input.to_owned();
    for layer in &stack.layers {
        current = agg_layer_direct(current.view(), layer);
    }
    current
}

/// Encoder forward via the direct convolution: prep each secret,
/// concatenate `[cover ‖ prep outputs]`, run the hiding stack.
pub fn encode_direct(
    model: &StegoModel<f64>,
    cover: ArrayView4<f64>,
    secrets: &[Array4<f64>],
) -> Array4<f64> {
    assert_eq!(secrets.len(), model.secret_count());
    let preps: Vec<Array4<f64>> = model
        .preps
        .iter()
        .zip(secrets)
        .map(|(stack, secret)| stack_direct(secret.view(), stack))
        .collect();
    let mut parts = vec![cover];
    parts.extend(preps.iter().map(|p| p.view()));
    let hidden_in = ndarray::concatenate(Axis(3), &parts).expect("shapes agree");
    stack_direct(hidden_in.view(), &model.hiding)
}

/// Reveal forward via the direct convolution.
pub fn reveal_direct(model: &StegoModel<f64>, i: usize, container: ArrayView4<f64>) -> Array4<f64> {
    stack_direct(container, &model.reveals[i])
}

/// Scalar-loop sum of squared error, averaged over the batch axis.
pub fn sse_mean_direct(a: ArrayView4<f64>, b: ArrayView4<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let (n, h, w, c) = a.dim();
    let mut sum = 0.0;
    for bi in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let d = a[(bi, y, x, ch)] - b[(bi, y, x, ch)];
                    sum += d * d;
                }
            }
        }
    }
    sum / n as f64
}

/// Scalar-loop full training loss.
pub fn loss_direct(
    container: ArrayView4<f64>,
    cover: ArrayView4<f64>,
    decoded: &[Array4<f64>],
    secrets: &[Array4<f64>],
    lambda_c: f64,
    lambda_s: f64,
) -> f64 {
    let mut total = lambda_c * sse_mean_direct(container, cover);
    for (d, s) in decoded.iter().zip(secrets) {
        total += lambda_s * sse_mean_direct(d.view(), s.view());
    }
    total
}

/// Scalar-loop bilinear resampling with half-pixel centers and edge
/// clamping, mirroring the documented contract of
/// `data::bilinear_resize` without sharing its code.
pub fn bilinear_reference(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
            let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let wy = sy - y0;
            let wx = sx - x0;
            let clamp_y = |v: f64| (v.max(0.0) as usize).min(h - 1);
            let clamp_x = |v: f64| (v.max(0.0) as usize).min(w - 1);
            let (y0c, y1c) = (clamp_y(y0), clamp_y(y0 + 1.0));
            let (x0c, x1c) = (clamp_x(x0), clamp_x(x0 + 1.0));
            for ch in 0..c {
                let at = |y: usize, x: usize| f64::from(src[(y, x, ch)]);
                let top = at(y0c, x0c) * (1.0 - wx) + at(y0c, x1c) * wx;
                let bot = at(y1c, x0c) * (1.0 - wx) + at(y1c, x1c) * wx;
                out[(oy, ox, ch)] = (top * (1.0 - wy) + bot * wy) as f32;
            }
        }
    }
    out
}

/// Largest absolute element difference between two tensors.
pub fn max_abs_diff(a: ArrayView4<f64>, b: ArrayView4<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    ndarray::Zip::from(&a)
        .and(&b)
        .fold(0.0f64, |acc, &x, &y| acc.max((x - y).abs()))
}

/// Upcast an `f32` tensor to `f64` (exact).
pub fn to_f64(a: ArrayView4<f32>) -> Array4<f64> {
    a.mapv(f64::from)
}

/// Random batch with values in `[0, 1)`, deterministic under `seed`.
pub fn random_batch_f32(
    batch: usize,
    k: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> StegoBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensor = || Array4::from_shape_fn((batch, h, w, 3), |_| rng.random_range(0.0f32..1.0));
    let cover = tensor();
    let secrets = (0..k).map(|_| tensor()).collect();
    StegoBatch::new(cover, secrets).expect("shapes agree by construction")
}

/// `f64` counterpart of [`random_batch_f32`] (independent draw, same
/// distribution).
pub fn random_batch_f64(
    batch: usize,
    k: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> StegoBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensor = || Array4::from_shape_fn((batch, h, w, 3), |_| rng.random_range(0.0f64..1.0));
    let cover = tensor();
    let secrets = (0..k).map(|_| tensor()).collect();
    StegoBatch::new(cover, secrets).expect("shapes agree by construction")
}

/// Exactly upcast an `f32` batch to `f64`.
pub fn batch_to_f64(batch: &StegoBatch<f32>) -> StegoBatch<f64> {
    StegoBatch::new(
        batch.cover.mapv(f64::from),
        batch.secrets.iter().map(|s| s.mapv(f64::from)).collect(),
    )
    .expect("shapes preserved by cast")
}

/// A smooth, class-structured 64x64 RGB image: per-class sinusoidal
/// pattern with per-image phase/amplitude jitter and a little noise.
/// Learnable content for desk-scale training runs — not pure noise,
/// which nothing could reconstruct.
pub fn synth_image(class: usize, index: u64, seed: u64) -> Array3<f32> {
    use std::f32::consts::TAU;
    let mut class_rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9));
    let base_freq: f32 = class_rng.random_range(0.5..3.0);
    let angle: f32 = class_rng.random_range(0.0..TAU);
    let channel_phase: [f32; 3] = [
        class_rng.random_range(0.0..TAU),
        class_rng.random_range(0.0..TAU),
        class_rng.random_range(0.0..TAU),
    ];

    let mut img_rng = ChaCha8Rng::seed_from_u64(
        seed ^ (class as u64).wrapping_mul(0x9E37_79B9) ^ index.wrapping_mul(0x85EB_CA6B),
    );
    let jitter: f32 = img_rng.random_range(-0.5..0.5);
    let amp: f32 = img_rng.random_range(0.3..0.45);
    let (dy, dx) = (angle.sin(), angle.cos());

    Array3::from_shape_fn((64, 64, 3), |(y, x, c)| {
        let t = (y as f32 * dy + x as f32 * dx) / 64.0;
        let wave = (TAU * base_freq * t + channel_phase[c] + jitter).sin();
        let noise: f32 = img_rng.random_range(-0.02..0.02);
        (0.5 + amp * wave + noise).clamp(0.0, 1.0)
    })
}

/// Write a class-per-directory synthetic dataset of 64x64 PNGs and
/// return the root. Layout matches what `data::build_dataset` expects.
pub fn write_synth_dataset(root: &Path, classes: usize, per_class: usize, seed: u64) {
    for class in 0..classes {
        let dir = root.join(format!("class_{class:02}"));
        std::fs::create_dir_all(&dir).expect("create class dir");
        for idx in 0..per_class {
            let img = synth_image(class, idx as u64, seed);
            deepsteg::data::save_image(img.view(), &dir.join(format!("img_{idx:03}.png")))
                .expect("write synthetic image");
        }
    }
}
