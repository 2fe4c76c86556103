//! Image-pair quality metrics and dataset evaluation reports.
//!
//! Two squared-error conventions coexist in this crate and are named
//! apart deliberately:
//!
//! * [`eval_mse`] — mean over *all elements*, the convention PSNR
//!   expects. Used everywhere in this module.
//! * `loss_sse` (see [`crate::train`]) — sum over pixels and channels,
//!   mean over the batch only. Used by the training objective, where
//!   per-image magnitudes in the tens of thousands are expected.
//!
//! SSIM runs on a grayscale plane (channel mean) with non-overlapping
//! 8x8 windows and the standard constants `C1 = (0.01·max)²`,
//! `C2 = (0.03·max)²`; the window size is an explicit parameter of
//! [`ssim_with_window`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayView4, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stack_images, LoadedSplit};
use crate::net::StegoModel;
use crate::seeds::{self, Stream};

/// Default SSIM window side length.
pub const SSIM_WINDOW: usize = 8;

/// Errors from metric computation and evaluation.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{context}: expected shape {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("images ({h}x{w}) are smaller than one {window}x{window} SSIM window")]
    WindowTooLarge { h: usize, w: usize, window: usize },
    #[error("evaluation split has no images")]
    EmptySplit,
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("failed to write {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn check_shapes<F: NdFloat>(
    a: ArrayView4<F>,
    b: ArrayView4<F>,
    context: &'static str,
) -> Result<(), MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::ShapeMismatch {
            context,
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Mean squared error over all elements (batch, pixels, and channels).
pub fn eval_mse<F: NdFloat>(a: ArrayView4<F>, b: ArrayView4<F>) -> Result<f64, MetricsError> {
    check_shapes(a, b, "eval_mse")?;
    let mut sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x.to_f64().unwrap() - y.to_f64().unwrap();
        sum += d * d;
    }
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for signals spanning `[0, max_value]`.
/// Identical inputs produce the `f64::INFINITY` sentinel.
pub fn psnr_with_max<F: NdFloat>(
    a: ArrayView4<F>,
    b: ArrayView4<F>,
    max_value: f64,
) -> Result<f64, MetricsError> {
    let mse = eval_mse(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// [`psnr_with_max`] for the crate's native `[0, 1]` range.
pub fn psnr<F: NdFloat>(a: ArrayView4<F>, b: ArrayView4<F>) -> Result<f64, MetricsError> {
    psnr_with_max(a, b, 1.0)
}

/// Structural similarity averaged over images and non-overlapping
/// windows; grayscale conversion is the per-pixel channel mean.
/// Partial windows at the right/bottom edge are ignored.
pub fn ssim_with_window<F: NdFloat>(
    a: ArrayView4<F>,
    b: ArrayView4<F>,
    window: usize,
) -> Result<f64, MetricsError> {
    check_shapes(a, b, "ssim")?;
    let (n, h, w, _) = a.dim();
    assert!(window > 0, "SSIM window must be positive");
    if h < window || w < window {
        return Err(MetricsError::WindowTooLarge { h, w, window });
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let area = (window * window) as f64;

    let mut total = 0.0f64;
    for img in 0..n {
        let ga = gray_plane(a, img);
        let gb = gray_plane(b, img);
        let mut img_sum = 0.0f64;
        let mut windows = 0usize;
        for wy in 0..h / window {
            for wx in 0..w / window {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in wy * window..(wy + 1) * window {
                    for x in wx * window..(wx + 1) * window {
                        let (va, vb) = (ga[(y, x)], gb[(y, x)]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (mu_a, mu_b) = (sa / area, sb / area);
                // Population (biased) variance/covariance.
                let var_a = saa / area - mu_a * mu_a;
                let var_b = sbb / area - mu_b * mu_b;
                let cov = sab / area - mu_a * mu_b;
                img_sum += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                windows += 1;
            }
        }
        total += img_sum / windows as f64;
    }
    Ok(total / n as f64)
}

/// [`ssim_with_window`] with the default 8x8 window.
pub fn ssim<F: NdFloat>(a: ArrayView4<F>, b: ArrayView4<F>) -> Result<f64, MetricsError> {
    ssim_with_window(a, b, SSIM_WINDOW)
}

fn gray_plane<F: NdFloat>(batch: ArrayView4<F>, img: usize) -> Array2<f64> {
    let (_, h, w, c) = batch.dim();
    let view = batch.index_axis(Axis(0), img);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut sum = 0.0f64;
        for ch in 0..c {
            sum += view[(y, x, ch)].to_f64().unwrap();
        }
        sum / c as f64
    })
}

/// Amplified absolute difference: `clamp(|a - b| * gain, 0, 1)`.
/// Visualizes embedding artifacts that are invisible at unit gain.
pub fn diff_image<F: NdFloat>(
    a: ArrayView4<F>,
    b: ArrayView4<F>,
    gain: f64,
) -> Result<Array4<F>, MetricsError> {
    check_shapes(a, b, "diff_image")?;
    assert!(gain >= 1.0, "diff gain must be at least 1");
    let g = F::from(gain).unwrap();
    let mut out = a.to_owned();
    out.zip_mut_with(&b, |x, &y| {
        let amp = (*x - y).abs() * g;
        *x = amp.min(F::one()).max(F::zero());
    });
    Ok(out)
}

/// MSE, PSNR, and SSIM for one image pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub mse: f64,
    /// dB; `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

/// Compute all three pair metrics at once.
pub fn pair_metrics<F: NdFloat>(a: ArrayView4<F>, b: ArrayView4<F>) -> Result<PairMetrics, MetricsError> {
    Ok(PairMetrics { mse: eval_mse(a, b)?, psnr: psnr(a, b)?, ssim: ssim(a, b)? })
}

/// One evaluated image pair: which tuple it came from and what role the
/// pair plays (`cover` = cover vs container, `secret_i` = secret `i` vs
/// its decode).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRow {
    pub tuple_index: usize,
    pub role: String,
    pub metrics: PairMetrics,
}

/// Mean and median of each metric over one role's rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoleSummary {
    pub role: String,
    pub count: usize,
    pub mean: PairMetrics,
    pub median: PairMetrics,
}

/// Full evaluation result: per-pair rows plus per-role aggregates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub secret_count: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub rows: Vec<PairRow>,
    pub summaries: Vec<RoleSummary>,
}

/// Sample `sample_count` tuples from `split` (independently per pool,
/// deterministic under `seed`), run the noiseless encode/decode path,
/// and report per-pair metrics with per-role aggregates.
///
/// `checkpoint_id` is recorded verbatim so reports stay traceable to the
/// model that produced them. If a pool holds fewer than `sample_count`
/// images the whole pool is used (with a warning).
pub fn evaluate_dataset(
    model: &StegoModel<f32>,
    split: &LoadedSplit,
    sample_count: usize,
    seed: u64,
    checkpoint_id: &str,
) -> Result<EvalReport, MetricsError> {
    let batch = sample_eval_batch(split, sample_count, seed)?;
    check_secret_count(model, split)?;
    let n = batch.cover.dim().0;
    let container = model.encode_forward(&batch)?;
    let decoded = model.decode_all(container.view())?;

    let mut rows = Vec::with_capacity(n * (1 + split.k()));
    fn one(arr: &Array4<f32>, i: usize) -> ArrayView4<'_, f32> {
        arr.slice(ndarray::s![i..i + 1, .., .., ..])
    }
    for i in 0..n {
        rows.push(PairRow {
            tuple_index: i,
            role: "cover".into(),
            metrics: pair_metrics(one(&batch.cover, i), one(&container, i))?,
        });
        for (s, (secret, dec)) in batch.secrets.iter().zip(&decoded).enumerate() {
            rows.push(PairRow {
                tuple_index: i,
                role: format!("secret_{}", s + 1),
                metrics: pair_metrics(one(secret, i), one(dec, i))?,
            });
        }
    }

    let mut roles = vec!["cover".to_string()];
    roles.extend((1..=split.k()).map(|s| format!("secret_{s}")));
    let summaries = roles.iter().map(|role| summarize_role(role, &rows)).collect();

    Ok(EvalReport {
        checkpoint: checkpoint_id.to_string(),
        secret_count: split.k(),
        sample_count: n,
        seed,
        rows,
        summaries,
    })
}

/// Encode/decode the same tuples [`evaluate_dataset`] samples under
/// `seed` and write each pair's amplified difference ([`diff_image`])
/// as a PNG named `tuple<i>_<role>_diff_gain<g>.png` under `out_dir`.
/// Returns the written paths in row order.
pub fn write_diff_images(
    model: &StegoModel<f32>,
    split: &LoadedSplit,
    sample_count: usize,
    seed: u64,
    gain: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, MetricsError> {
    let batch = sample_eval_batch(split, sample_count, seed)?;
    check_secret_count(model, split)?;
    let container = model.encode_forward(&batch)?;
    let decoded = model.decode_all(container.view())?;
    std::fs::create_dir_all(out_dir)
        .map_err(|source| MetricsError::Io { path: out_dir.to_path_buf(), source })?;

    // "gain5" for whole-number gains, "gain2.5" otherwise.
    let tag = if gain.fract() == 0.0 { format!("{}", gain as i64) } else { format!("{gain}") };
    let mut paths = Vec::with_capacity(batch.cover.dim().0 * (1 + split.k()));
    let mut save = |a: ArrayView4<f32>, b: ArrayView4<f32>, name: String| {
        let diff = diff_image(a, b, gain)?;
        let path = out_dir.join(name);
        crate::data::save_image(diff.index_axis(Axis(0), 0), &path)?;
        paths.push(path);
        Ok::<(), MetricsError>(())
    };
    fn one(arr: &Array4<f32>, i: usize) -> ArrayView4<'_, f32> {
        arr.slice(ndarray::s![i..i + 1, .., .., ..])
    }
    for i in 0..batch.cover.dim().0 {
        save(one(&batch.cover, i), one(&container, i), format!("tuple{i}_cover_diff_gain{tag}.png"))?;
        for (s, (secret, dec)) in batch.secrets.iter().zip(&decoded).enumerate() {
            save(
                one(secret, i),
                one(dec, i),
                format!("tuple{i}_secret{}_diff_gain{tag}.png", s + 1),
            )?;
        }
    }
    Ok(paths)
}

fn check_secret_count(model: &StegoModel<f32>, split: &LoadedSplit) -> Result<(), MetricsError> {
    if model.secret_count() != split.k() {
        return Err(crate::net::NetError::SecretCountMismatch {
            expected: model.secret_count(),
            got: split.k(),
        }
        .into());
    }
    Ok(())
}

/// Sample one batch of evaluation tuples: `sample_count` indices drawn
/// independently per pool, deterministic under `seed`. Shared by
/// [`evaluate_dataset`] and [`write_diff_images`] so reports and diff
/// images describe the same tuples.
fn sample_eval_batch(
    split: &LoadedSplit,
    sample_count: usize,
    seed: u64,
) -> Result<crate::data::StegoBatch<f32>, MetricsError> {
    if split.pool_len() == 0 || sample_count == 0 {
        return Err(MetricsError::EmptySplit);
    }
    let n = sample_count.min(split.pool_len());
    if n < sample_count {
        log::warn!("evaluation pools hold {n} images; clamping sample_count from {sample_count}");
    }

    let sample_pool = |pool_idx: u64, len: usize| -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::EvalSample, pool_idx));
        rand::seq::index::sample(&mut rng, len, n).into_vec()
    };
    let cover_idx = sample_pool(0, split.cover.len());
    let cover = stack_images(&cover_idx.iter().map(|&i| &split.cover[i]).collect::<Vec<_>>());
    let secrets: Vec<Array4<f32>> = split
        .secrets
        .iter()
        .enumerate()
        .map(|(p, pool)| {
            let idx = sample_pool(p as u64 + 1, pool.len());
            stack_images(&idx.iter().map(|&i| &pool[i]).collect::<Vec<_>>())
        })
        .collect();
    Ok(crate::data::StegoBatch::new(cover, secrets)?)
}

fn summarize_role(role: &str, rows: &[PairRow]) -> RoleSummary {
    let picked: Vec<&PairMetrics> = rows.iter().filter(|r| r.role == role).map(|r| &r.metrics).collect();
    let count = picked.len();
    let mean_of = |f: fn(&PairMetrics) -> f64| picked.iter().map(|m| f(m)).sum::<f64>() / count as f64;
    let median_of = |f: fn(&PairMetrics) -> f64| {
        let mut v: Vec<f64> = picked.iter().map(|m| f(m)).collect();
        v.sort_by(f64::total_cmp);
        if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
        }
    };
    RoleSummary {
        role: role.to_string(),
        count,
        mean: PairMetrics {
            mse: mean_of(|m| m.mse),
            psnr: mean_of(|m| m.psnr),
            ssim: mean_of(|m| m.ssim),
        },
        median: PairMetrics {
            mse: median_of(|m| m.mse),
            psnr: median_of(|m| m.psnr),
            ssim: median_of(|m| m.ssim),
        },
    }
}

impl EvalReport {
    /// CSV with one row per image pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tuple_index,role,mse,psnr,ssim\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                row.tuple_index, row.role, row.metrics.mse, row.metrics.psnr, row.metrics.ssim
            );
        }
        out
    }

    /// JSON summary (aggregates only; the CSV carries per-pair rows).
    /// Non-finite PSNR values are rendered as the string `"inf"` since
    /// JSON has no infinity literal.
    pub fn to_json(&self) -> serde_json::Value {
        let num = |v: f64| -> serde_json::Value {
            if v.is_finite() {
                serde_json::json!(v)
            } else {
                serde_json::Value::String("inf".into())
            }
        };
        let metrics_json = |m: &PairMetrics| {
            serde_json::json!({ "mse": num(m.mse), "psnr": num(m.psnr), "ssim": num(m.ssim) })
        };
        serde_json::json!({
            "checkpoint": self.checkpoint,
            "secret_count": self.secret_count,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "summaries": self.summaries.iter().map(|s| serde_json::json!({
                "role": s.role,
                "count": s.count,
                "mean": metrics_json(&s.mean),
                "median": metrics_json(&s.median),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_csv())
            .map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, format!("{:#}\n", self.to_json()))
            .map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
    }
}
