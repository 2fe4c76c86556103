//! File-boundary behavior: quantization, container PNGs, and the LSB
//! baseline, all through real files.

mod common;

use std::path::PathBuf;

use common::*;
use deepsteg::codec::{
    decode_file, encode_file, lsb_embed_files, lsb_extract_files, quantize_tensor, quantize_unit,
    CodecError, LsbPlan, QuantMode, QuantPolicy,
};
use deepsteg::data::{load_image, save_image, stack_images, tensor_from_rgb8, load_rgb8};
use deepsteg::net::{NetworkSpec, StegoModel};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model whose decoded secrets stay comfortably inside `[0, 1]`:
/// reveal projection weights scaled down, biases at mid-gray. Keeps the
/// codec-boundary checks about the codec, not about training quality.
fn in_range_model(k: usize) -> StegoModel<f32> {
    let mut model: StegoModel<f32> = StegoModel::init(&NetworkSpec::new(k), 1234);
    for reveal in &mut model.reveals {
        let projection = reveal.layers.last_mut().expect("reveal stacks end in a projection");
        for conv in &mut projection.branches {
            conv.weight.mapv_inplace(|w| w * 0.05);
            conv.bias.fill(0.5);
        }
    }
    model
}

fn write_synth_images(dir: &std::path::Path, count: usize, seed: u64) -> Vec<PathBuf> {
    (0..count)
        .map(|i| {
            let path = dir.join(format!("in_{i}.png"));
            save_image(synth_image(i, 0, seed).view(), &path).unwrap();
            path
        })
        .collect()
}

#[test]
fn quantization_is_idempotent_and_bounded() {
    for i in 0..=4000 {
        let v = -1.0 + i as f32 * 0.00075; // sweeps [-1, 2]
        let q = quantize_unit(v);
        assert_eq!(quantize_unit(q), q, "idempotent at {v}");
        assert!((q - v.clamp(0.0, 1.0)).abs() <= 1.0 / 510.0 + f32::EPSILON);
        assert!((q * 255.0 - (q * 255.0).round()).abs() < 1e-3, "q sits on the 8-bit grid");
    }
}

#[test]
fn container_png_is_byte_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_synth_images(dir.path(), 3, 77);
    let model = in_range_model(2);

    let container = dir.path().join("container.png");
    let summary = encode_file(
        &model,
        &paths[0],
        &paths[1..3],
        &container,
        QuantPolicy { mode: QuantMode::Quantize8Bit },
    )
    .unwrap();
    assert_eq!(summary.container_path, container);
    assert!(summary.mse_pre_quant.is_finite() && summary.mse_post_quant.is_finite());

    // Re-quantizing what the file holds and writing it again must
    // reproduce the file exactly.
    let reloaded = stack_images(&[&load_image(&container).unwrap()]);
    let requantized = quantize_tensor(reloaded.view());
    assert_eq!(requantized, reloaded, "file values already sit on the 8-bit grid");
    let again = dir.path().join("container_again.png");
    save_image(requantized.index_axis(ndarray::Axis(0), 0), &again).unwrap();
    assert_eq!(
        std::fs::read(&container).unwrap(),
        std::fs::read(&again).unwrap(),
        "byte-idempotent through a quantize/rewrite cycle"
    );
}

#[test]
fn both_quant_modes_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_synth_images(dir.path(), 2, 11);
    let model = in_range_model(1);

    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    let s1 = encode_file(&model, &paths[0], &paths[1..2], &a, QuantPolicy { mode: QuantMode::Quantize8Bit }).unwrap();
    let s2 = encode_file(&model, &paths[0], &paths[1..2], &b, QuantPolicy { mode: QuantMode::FloatPassthrough }).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(s1.quant_mode, QuantMode::Quantize8Bit);
    assert_eq!(s2.quant_mode, QuantMode::FloatPassthrough);
    assert_eq!(s1.mse_pre_quant, s2.mse_pre_quant);
}

#[test]
fn decode_file_tracks_in_memory_decode_within_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_synth_images(dir.path(), 3, 41);
    let model = in_range_model(2);

    let container_path = dir.path().join("container.png");
    encode_file(&model, &paths[0], &paths[1..3], &container_path, QuantPolicy::default()).unwrap();

    // Both sides consume the identical container bytes.
    let container = stack_images(&[&load_image(&container_path).unwrap()]);
    let in_memory = model.decode_all(container.view()).unwrap();

    let out_dir = dir.path().join("decoded");
    let files = decode_file(&model, &container_path, &out_dir).unwrap();
    assert_eq!(files.len(), 2);
    assert!(files[0].ends_with("secret_1.png") && files[1].ends_with("secret_2.png"));

    for (file, mem) in files.iter().zip(&in_memory) {
        let from_file = load_image(file).unwrap();
        let max_diff = from_file
            .iter()
            .zip(mem.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(
            max_diff <= 1.0 / 255.0,
            "file-decoded secret differs from in-memory decode by {max_diff}"
        );
    }
}

#[test]
fn codec_errors_are_specific() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_synth_images(dir.path(), 3, 9);
    let model = in_range_model(1);

    // Too many secrets for the model.
    let out = dir.path().join("c.png");
    assert!(matches!(
        encode_file(&model, &paths[0], &paths[1..3], &out, QuantPolicy::default()),
        Err(CodecError::SecretCountMismatch { expected: 1, got: 2 })
    ));

    // Containers must already be 64x64; decode never resizes.
    let big = dir.path().join("big.png");
    save_image(
        ndarray::Array3::<f32>::from_elem((128, 128, 3), 0.5).view(),
        &big,
    )
    .unwrap();
    assert!(decode_file(&model, &big, dir.path()).is_err());
}

#[test]
fn lsb_round_trips_top_bits_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut random_png = |name: &str| {
        let img = RgbImage::from_fn(64, 64, |_, _| {
            image::Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()])
        });
        let path = dir.path().join(name);
        img.save(&path).unwrap();
        path
    };
    let cover_path = random_png("cover.png");
    let secret_paths: Vec<PathBuf> =
        (0..3).map(|i| random_png(&format!("s{i}.png"))).collect();

    for (k, bits) in [(1usize, 4u8), (2, 2), (3, 2)] {
        let plan = LsbPlan::new(k, bits).unwrap();
        let container_path = dir.path().join(format!("lsb_{k}_{bits}.png"));
        lsb_embed_files(&cover_path, &secret_paths[..k], &container_path, plan).unwrap();
        let out_dir = dir.path().join(format!("out_{k}_{bits}"));
        let extracted = lsb_extract_files(&container_path, &out_dir, plan).unwrap();
        assert_eq!(extracted.len(), k);

        // Container keeps the cover's top bits.
        let cover = load_rgb8(&cover_path).unwrap();
        let container = load_rgb8(&container_path).unwrap();
        let keep_mask: u8 = !0u8 << (8 - plan.cover_bits_kept());
        for (c, t) in cover.pixels().zip(container.pixels()) {
            for ch in 0..3 {
                assert_eq!(c[ch] & keep_mask, t[ch] & keep_mask);
            }
        }

        // Each extracted image equals the original's top bits exactly.
        let top_mask: u8 = !0u8 << (8 - bits);
        for (i, path) in extracted.iter().enumerate() {
            let original = load_rgb8(&secret_paths[i]).unwrap();
            let recovered = load_rgb8(path).unwrap();
            for (o, r) in original.pixels().zip(recovered.pixels()) {
                for ch in 0..3 {
                    assert_eq!(o[ch] & top_mask, r[ch], "plan ({k},{bits}) secret {i}");
                }
            }
        }
    }
}

#[test]
fn lsb_plans_respect_the_bit_budget() {
    assert!(LsbPlan::new(4, 2).is_err(), "8 bits leaves the cover nothing");
    assert!(LsbPlan::new(0, 2).is_err());
    assert!(LsbPlan::new(2, 0).is_err());
    assert!(LsbPlan::new(7, 1).is_ok());
    assert_eq!(LsbPlan::new(3, 2).unwrap().cover_bits_kept(), 2);
}

#[test]
fn quant_mode_strings_round_trip() {
    assert_eq!("quantize-8bit".parse::<QuantMode>().unwrap(), QuantMode::Quantize8Bit);
    assert_eq!("quant8".parse::<QuantMode>().unwrap(), QuantMode::Quantize8Bit);
    assert_eq!("float-passthrough".parse::<QuantMode>().unwrap(), QuantMode::FloatPassthrough);
    assert_eq!("float".parse::<QuantMode>().unwrap(), QuantMode::FloatPassthrough);
    assert!("both".parse::<QuantMode>().is_err());
    assert_eq!(QuantMode::Quantize8Bit.as_str(), "quantize-8bit");
}

#[test]
fn tensor_bridge_matches_byte_images() {
    // tensor_from_rgb8 and the file loader agree on scaling.
    let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([x as u8, y as u8, 255]));
    let t = tensor_from_rgb8(&img);
    assert_eq!(t[(3, 5, 0)], 5.0 / 255.0);
    assert_eq!(t[(3, 5, 1)], 3.0 / 255.0);
    assert_eq!(t[(0, 0, 2)], 1.0);
}
