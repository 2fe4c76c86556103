//! File-level encoding/decoding and the LSB baseline.
//!
//! The neural path runs a trained model over image files: encode loads a
//! cover and `k` secrets, produces a container, and writes an 8-bit PNG;
//! decode reads a container PNG and writes `secret_1.png … secret_k.png`.
//! The float-to-byte boundary is explicit: [`quantize_unit`] clamps to
//! `[0, 1]` and rounds to the 8-bit grid, and encode reports the
//! cover-vs-container MSE both before and after that step, because the
//! network's container lives in float space but real transport is bytes.
//!
//! The LSB baseline packs each secret's top bits into the container's
//! low bit slots: with plan `(k, b)`, the container byte keeps the
//! cover's top `8 - k·b` bits, then secret 1's top `b` bits in the
//! highest remaining slot, secret 2 below it, and so on. Extraction is
//! exact on the kept bits; everything below a secret's top `b` bits is
//! lost.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    self, load_image, load_rgb8, stack_images, tensor_from_rgb8, DataError, StegoBatch, IMAGE_SIZE,
};
use crate::metrics::{eval_mse, MetricsError};
use crate::net::{NetError, StegoModel};

/// Errors from file codecs.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint hides {expected} secrets, got {got} secret paths")]
    SecretCountMismatch { expected: usize, got: usize },
    #[error("invalid LSB plan: {0}")]
    InvalidPlan(String),
    #[error("LSB images must share dimensions: cover is {cover_w}x{cover_h}, secret {index} is {got_w}x{got_h}")]
    LsbShapeMismatch {
        cover_w: u32,
        cover_h: u32,
        index: usize,
        got_w: u32,
        got_h: u32,
    },
    #[error("failed to create {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// What happens to container values at the file boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMode {
    /// Keep the float container as the canonical output; the written
    /// PNG still rounds to bytes (identical bytes to `Quantize8Bit`),
    /// but the distortion summary treats the float tensor as final.
    FloatPassthrough,
    /// Clamp to `[0, 1]` and round to the 8-bit grid before writing.
    #[default]
    Quantize8Bit,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::FloatPassthrough => "float-passthrough",
            QuantMode::Quantize8Bit => "quantize-8bit",
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "float-passthrough" | "float" => Ok(QuantMode::FloatPassthrough),
            "quantize-8bit" | "quant8" => Ok(QuantMode::Quantize8Bit),
            other => Err(format!(
                "unknown quantization mode {other:?} (expected \"float-passthrough\" or \"quantize-8bit\")"
            )),
        }
    }
}

/// Quantization policy for the codec boundary. The clamp range is fixed
/// at `[0, 1]`, the crate's pixel range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub mode: QuantMode,
}

/// Clamp to `[0, 1]` and round to the nearest 1/255 step. Idempotent;
/// `|quantize_unit(v) - clamp(v)| <= 1/510`.
pub fn quantize_unit(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// [`quantize_unit`] over a whole tensor.
pub fn quantize_tensor(t: ArrayView4<f32>) -> Array4<f32> {
    t.mapv(quantize_unit)
}

/// Outcome of [`encode_file`]: where the container went and how far it
/// sits from the cover, before and after quantization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodeSummary {
    pub container_path: PathBuf,
    pub quant_mode: QuantMode,
    /// Cover-vs-container MSE of the raw float network output.
    pub mse_pre_quant: f64,
    /// Cover-vs-container MSE after clamping and 8-bit rounding — what a
    /// reader of the PNG actually sees.
    pub mse_post_quant: f64,
}

/// Encode image files through a trained model and write the container
/// as an 8-bit PNG. Inputs are resized to 64x64 if needed (with a
/// warning); input files are never modified.
pub fn encode_file(
    model: &StegoModel<f32>,
    cover_path: &Path,
    secret_paths: &[PathBuf],
    out_path: &Path,
    policy: QuantPolicy,
) -> Result<EncodeSummary, CodecError> {
    if secret_paths.len() != model.secret_count() {
        return Err(CodecError::SecretCountMismatch {
            expected: model.secret_count(),
            got: secret_paths.len(),
        });
    }
    let cover = load_image(cover_path)?;
    let secrets = secret_paths
        .iter()
        .map(|p| load_image(p).map(|t| stack_images(&[&t])))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = StegoBatch::new(stack_images(&[&cover]), secrets)?;

    let container = model.encode_forward(&batch)?;
    let quantized = quantize_tensor(container.view());
    let mse_pre_quant = eval_mse(batch.cover.view(), container.view())?;
    let mse_post_quant = eval_mse(batch.cover.view(), quantized.view())?;

    // Both modes write the same bytes — a PNG is 8-bit either way; the
    // mode is recorded so the summary's provenance is explicit.
    data::save_image(quantized.index_axis(Axis(0), 0), out_path)?;
    Ok(EncodeSummary {
        container_path: out_path.to_path_buf(),
        quant_mode: policy.mode,
        mse_pre_quant,
        mse_post_quant,
    })
}

/// Decode a 64x64 RGB container file through a trained model; writes
/// `secret_1.png … secret_k.png` under `out_dir` (created if missing)
/// and returns the paths in encoding order.
pub fn decode_file(
    model: &StegoModel<f32>,
    container_path: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, CodecError> {
    let img = load_rgb8(container_path)?;
    let (w, h) = img.dimensions();
    if (w, h) != (IMAGE_SIZE as u32, IMAGE_SIZE as u32) {
        return Err(DataError::WrongSize {
            path: container_path.to_path_buf(),
            got_w: w,
            got_h: h,
            want: IMAGE_SIZE as u32,
        }
        .into());
    }
    let container = stack_images(&[&tensor_from_rgb8(&img)]);
    let decoded = model.decode_all(container.view())?;

    std::fs::create_dir_all(out_dir)
        .map_err(|source| CodecError::Io { path: out_dir.to_path_buf(), source })?;
    let mut paths = Vec::with_capacity(decoded.len());
    for (i, tensor) in decoded.iter().enumerate() {
        let path = out_dir.join(format!("secret_{}.png", i + 1));
        // Decoded values are unbounded floats; clamp at the boundary.
        data::save_image(tensor.index_axis(Axis(0), 0), &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Bit budget for LSB embedding: `k` secrets at `bits_per_secret` bits
/// each, leaving the cover at least one top bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsbPlan {
    pub secret_count: usize,
    pub bits_per_secret: u8,
}

impl LsbPlan {
    pub fn new(secret_count: usize, bits_per_secret: u8) -> Result<LsbPlan, CodecError> {
        let plan = LsbPlan { secret_count, bits_per_secret };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.secret_count == 0 || self.bits_per_secret == 0 {
            return Err(CodecError::InvalidPlan(
                "secret count and bits per secret must be positive".into(),
            ));
        }
        let used = self.secret_count * usize::from(self.bits_per_secret);
        if used > 7 {
            return Err(CodecError::InvalidPlan(format!(
                "{} secrets x {} bits = {used} bits; at most 7 (cover keeps >= 1 top bit)",
                self.secret_count, self.bits_per_secret
            )));
        }
        Ok(())
    }

    /// Top bits of the cover preserved in the container.
    pub fn cover_bits_kept(&self) -> u8 {
        8 - (self.secret_count as u8) * self.bits_per_secret
    }

    /// Left-shift of secret `i`'s slot inside the container byte;
    /// secret 0 occupies the highest remaining slot.
    fn shift_for(&self, i: usize) -> u8 {
        (self.secret_count - 1 - i) as u8 * self.bits_per_secret
    }
}

fn check_lsb_shapes(cover: &RgbImage, secrets: &[&RgbImage]) -> Result<(), CodecError> {
    let (cw, ch) = cover.dimensions();
    for (i, s) in secrets.iter().enumerate() {
        let (gw, gh) = s.dimensions();
        if (gw, gh) != (cw, ch) {
            return Err(CodecError::LsbShapeMismatch {
                cover_w: cw,
                cover_h: ch,
                index: i + 1,
                got_w: gw,
                got_h: gh,
            });
        }
    }
    Ok(())
}

/// Pack each secret's top bits into the cover's low bit slots, per
/// channel. The container keeps the cover's top [`LsbPlan::cover_bits_kept`]
/// bits at every pixel.
pub fn lsb_embed(
    cover: &RgbImage,
    secrets: &[&RgbImage],
    plan: LsbPlan,
) -> Result<RgbImage, CodecError> {
    plan.validate()?;
    if secrets.len() != plan.secret_count {
        return Err(CodecError::SecretCountMismatch {
            expected: plan.secret_count,
            got: secrets.len(),
        });
    }
    check_lsb_shapes(cover, secrets)?;
    let b = plan.bits_per_secret;
    let keep_mask: u8 = !0u8 << (8 - plan.cover_bits_kept());
    let mut out = cover.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            let mut v = px[c] & keep_mask;
            for (i, s) in secrets.iter().enumerate() {
                let top = s.get_pixel(x, y)[c] >> (8 - b);
                v |= top << plan.shift_for(i);
            }
            px[c] = v;
        }
    }
    Ok(out)
}

/// Recover each secret's top bits from an LSB container; low bits are
/// zero-filled.
pub fn lsb_extract(container: &RgbImage, plan: LsbPlan) -> Result<Vec<RgbImage>, CodecError> {
    plan.validate()?;
    let b = plan.bits_per_secret;
    let slot_mask: u8 = (1u8 << b) - 1;
    let (w, h) = container.dimensions();
    let secrets = (0..plan.secret_count)
        .map(|i| {
            let shift = plan.shift_for(i);
            RgbImage::from_fn(w, h, |x, y| {
                let src = container.get_pixel(x, y);
                let px = |c: usize| ((src[c] >> shift) & slot_mask) << (8 - b);
                image::Rgb([px(0), px(1), px(2)])
            })
        })
        .collect();
    Ok(secrets)
}

/// [`lsb_embed`] over files: loads 8-bit RGB images, writes the
/// container PNG.
pub fn lsb_embed_files(
    cover_path: &Path,
    secret_paths: &[PathBuf],
    out_path: &Path,
    plan: LsbPlan,
) -> Result<(), CodecError> {
    let cover = load_rgb8(cover_path)?;
    let secrets = secret_paths.iter().map(|p| load_rgb8(p)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&RgbImage> = secrets.iter().collect();
    let container = lsb_embed(&cover, &refs, plan)?;
    container
        .save(out_path)
        .map_err(|source| CodecError::Data(DataError::Encode { path: out_path.to_path_buf(), source }))
}

/// [`lsb_extract`] over files: writes `secret_1.png … secret_k.png`
/// under `out_dir` and returns the paths.
pub fn lsb_extract_files(
    container_path: &Path,
    out_dir: &Path,
    plan: LsbPlan,
) -> Result<Vec<PathBuf>, CodecError> {
    let container = load_rgb8(container_path)?;
    let secrets = lsb_extract(&container, plan)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|source| CodecError::Io { path: out_dir.to_path_buf(), source })?;
    let mut paths = Vec::with_capacity(secrets.len());
    for (i, img) in secrets.iter().enumerate() {
        let path = out_dir.join(format!("secret_{}.png", i + 1));
        img.save(&path)
            .map_err(|source| DataError::Encode { path: path.clone(), source })
            .map_err(CodecError::Data)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_unit_cases() {
        assert_eq!(quantize_unit(0.0), 0.0);
        assert_eq!(quantize_unit(1.0), 1.0);
        assert_eq!(quantize_unit(-0.3), 0.0);
        assert_eq!(quantize_unit(1.7), 1.0);
        let q = quantize_unit(0.5);
        assert_eq!(q, 128.0 / 255.0);
        // Idempotence and the half-step bound.
        for i in 0..=1000 {
            let v = i as f32 / 1000.0 * 1.4 - 0.2;
            let q = quantize_unit(v);
            assert_eq!(quantize_unit(q), q, "idempotence at {v}");
            assert!((q - v.clamp(0.0, 1.0)).abs() <= 1.0 / 510.0 + f32::EPSILON, "bound at {v}");
        }
    }

    #[test]
    fn lsb_plan_budget() {
        assert!(LsbPlan::new(3, 2).is_ok());
        assert!(LsbPlan::new(1, 7).is_ok());
        assert!(LsbPlan::new(2, 4).is_err());
        assert!(LsbPlan::new(1, 8).is_err());
        assert!(LsbPlan::new(0, 2).is_err());
        assert_eq!(LsbPlan::new(3, 2).unwrap().cover_bits_kept(), 2);
    }

    #[test]
    fn lsb_byte_packing_worked_example() {
        // cover 0b10110100, k=3, 2 bits each, secret top bits 11, 00, 10
        // -> container 0b10_11_00_10.
        let cover = RgbImage::from_pixel(1, 1, image::Rgb([0b1011_0100; 3]));
        let secrets = [
            RgbImage::from_pixel(1, 1, image::Rgb([0b1100_0000; 3])),
            RgbImage::from_pixel(1, 1, image::Rgb([0b0000_0000; 3])),
            RgbImage::from_pixel(1, 1, image::Rgb([0b1000_0000; 3])),
        ];
        let refs: Vec<&RgbImage> = secrets.iter().collect();
        let plan = LsbPlan::new(3, 2).unwrap();
        let container = lsb_embed(&cover, &refs, plan).unwrap();
        assert_eq!(container.get_pixel(0, 0)[0], 0b1011_0010);
    }

    #[test]
    fn lsb_k1_nibble_keeps_cover_top() {
        let cover = RgbImage::from_pixel(1, 1, image::Rgb([0b1010_0110; 3]));
        let secret = RgbImage::from_pixel(1, 1, image::Rgb([0b0110_1111; 3]));
        let plan = LsbPlan::new(1, 4).unwrap();
        let container = lsb_embed(&cover, &[&secret], plan).unwrap();
        // Top nibble from cover, low nibble = secret's top nibble.
        assert_eq!(container.get_pixel(0, 0)[0], 0b1010_0110);
        let out = lsb_extract(&container, plan).unwrap();
        assert_eq!(out[0].get_pixel(0, 0)[0], 0b0110_0000);
    }

    #[test]
    fn lsb_zero_container_zero_secrets() {
        let container = RgbImage::from_pixel(4, 4, image::Rgb([0; 3]));
        let plan = LsbPlan::new(2, 2).unwrap();
        for s in lsb_extract(&container, plan).unwrap() {
            assert!(s.pixels().all(|p| p.0 == [0, 0, 0]));
        }
    }

    #[test]
    fn lsb_shape_mismatch_rejected() {
        let cover = RgbImage::new(4, 4);
        let secret = RgbImage::new(4, 5);
        let plan = LsbPlan::new(1, 2).unwrap();
        assert!(lsb_embed(&cover, &[&secret], plan).is_err());
    }
}
