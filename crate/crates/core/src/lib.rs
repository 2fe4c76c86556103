//! Trainable multi-image steganography.
//!
//! `deepsteg` hides `k` secret RGB images inside a single same-sized cover
//! image. A learned encoder (one preparation network per secret plus a
//! hiding network) produces a container image that looks like the cover;
//! `k` independent reveal networks each recover one secret from the
//! container alone. The crate also ships a fixed-bit LSB baseline codec,
//! an image-quality metrics suite, checkpointing, and a two-phase trainer.
//!
//! # Module map
//!
//! * [`data`] — image IO, dataset construction, splits, batch iteration.
//! * [`net`] — network definitions and forward passes.
//! * [`train`] — losses, Adam, the two-phase training loop, gradient
//!   checking, and checkpoint serialization.
//! * [`codec`] — file-level encode/decode (with 8-bit quantization) and
//!   the LSB baseline.
//! * [`metrics`] — MSE / PSNR / SSIM, difference images, dataset
//!   evaluation reports.
//!
//! # Features
//!
//! * `parallel` (default) — process batches with rayon. Disable for a
//!   fully sequential build; results are bit-identical either way.
//!
//! # Quick example
//!
//! ```
//! use deepsteg::data::StegoBatch;
//! use deepsteg::net::{NetworkSpec, StegoModel};
//! use ndarray::Array4;
//!
//! let spec = NetworkSpec::new(2);
//! let model: StegoModel<f32> = StegoModel::init(&spec, 7);
//! let batch = StegoBatch::new(
//!     Array4::zeros((1, 16, 16, 3)),
//!     vec![Array4::zeros((1, 16, 16, 3)), Array4::zeros((1, 16, 16, 3))],
//! )
//! .unwrap();
//! let container = model.encode_forward(&batch).unwrap();
//! let decoded = model.decode_all(container.view()).unwrap();
//! assert_eq!(decoded.len(), 2);
//! ```

pub mod codec;
pub mod data;
pub mod metrics;
pub mod net;
pub mod train;

mod parallel;
mod seeds;
