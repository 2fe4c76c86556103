//! Image loading, dataset construction, splitting, and batching.
//!
//! Images are 8-bit RGB on disk (PNG or JPEG) and dense `f32` tensors in
//! memory, normalized to `[0, 1]` by `v / 255`. Tensors are NHWC:
//! `(batch, height, width, channels)`. All training and evaluation images
//! are 64x64x3; [`load_image`] resizes anything else bilinearly.
//!
//! A dataset root is a directory of class subdirectories
//! (`<root>/<class>/*.png|jpg|jpeg`). [`build_dataset`] samples a
//! class-balanced record list, [`split_dataset`] partitions it into one
//! cover pool plus `k` secret pools, and [`batch_iterator`] streams
//! aligned [`StegoBatch`]es from the loaded pools.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array3, Array4, ArrayView3, NdFloat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::{self, Stream};

/// Side length of every training/evaluation image.
pub const IMAGE_SIZE: usize = 64;

/// Errors from dataset construction and image IO.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode image {path}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no class directories with images under {root}")]
    EmptyDataset { root: PathBuf },
    #[error("dataset has only {available} images, {requested} requested")]
    NotEnoughImages { requested: usize, available: usize },
    #[error("cannot split {records} records into {pools} non-empty pools")]
    TooFewRecords { records: usize, pools: usize },
    #[error("{context}: expected shape {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("a stego batch needs at least one secret image")]
    NoSecrets,
    #[error("image {path} is {got_w}x{got_h}, expected {want}x{want}")]
    WrongSize {
        path: PathBuf,
        got_w: u32,
        got_h: u32,
        want: u32,
    },
}

/// One cover batch paired with `k` secret batches of identical shape.
///
/// Secret order is the decoding contract: secret `i` is always recovered
/// by reveal network `i`.
#[derive(Clone, Debug)]
pub struct StegoBatch<F = f32> {
    pub cover: Array4<F>,
    pub secrets: Vec<Array4<F>>,
}

impl<F: NdFloat> StegoBatch<F> {
    /// Build a batch, validating that all `k + 1` tensors share one shape
    /// and that there is at least one secret and one image.
    pub fn new(cover: Array4<F>, secrets: Vec<Array4<F>>) -> Result<Self, DataError> {
        if secrets.is_empty() {
            return Err(DataError::NoSecrets);
        }
        if cover.dim().0 == 0 {
            return Err(DataError::ShapeMismatch {
                context: "stego batch cover",
                expected: "batch >= 1".into(),
                got: format!("{:?}", cover.dim()),
            });
        }
        for s in &secrets {
            if s.dim() != cover.dim() {
                return Err(DataError::ShapeMismatch {
                    context: "stego batch secret",
                    expected: format!("{:?}", cover.dim()),
                    got: format!("{:?}", s.dim()),
                });
            }
        }
        Ok(Self { cover, secrets })
    }

    /// Number of secrets `k`.
    pub fn secret_count(&self) -> usize {
        self.secrets.len()
    }

    /// Number of images in the batch.
    pub fn batch_size(&self) -> usize {
        self.cover.dim().0
    }
}

/// One sampled image: path relative to the dataset root plus its class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub rel_path: PathBuf,
    pub class: String,
}

/// Record pools for one experiment: a cover pool and `k` secret pools,
/// all the same length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub cover_pool: Vec<ImageRecord>,
    pub secret_pools: Vec<Vec<ImageRecord>>,
}

impl DatasetSplit {
    /// Number of secrets `k`.
    pub fn k(&self) -> usize {
        self.secret_pools.len()
    }

    /// Images per pool.
    pub fn pool_len(&self) -> usize {
        self.cover_pool.len()
    }
}

/// How records are partitioned into pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// `k + 1` disjoint equal pools in record order (default).
    Disjoint,
    /// Two halves: the first half serves as the secret pool for every
    /// decoder, the second half as the cover pool. Pools are *not*
    /// disjoint across secrets in this mode.
    SharedSecrets,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Disjoint => "disjoint",
            SplitMode::SharedSecrets => "shared-secrets",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "disjoint" => Ok(SplitMode::Disjoint),
            "shared-secrets" => Ok(SplitMode::SharedSecrets),
            other => Err(format!(
                "unknown split mode {other:?} (expected \"disjoint\" or \"shared-secrets\")"
            )),
        }
    }
}

fn has_image_ext(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

/// Deterministically sample `n_images` records from `root`, balanced
/// across class subdirectories where counts allow (per-class counts
/// differ by at most one when every class has enough images).
///
/// The returned list is in seeded-shuffled order, so a later
/// [`split_dataset`] produces randomized pools.
pub fn build_dataset(root: &Path, n_images: usize, seed: u64) -> Result<Vec<ImageRecord>, DataError> {
    let read_dir = |p: &Path| {
        fs::read_dir(p).map_err(|source| DataError::Io { path: p.to_path_buf(), source })
    };

    // Class directories sorted by name so scanning order never depends on
    // filesystem iteration order.
    let mut classes: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for entry in read_dir(root)? {
        let entry = entry.map_err(|source| DataError::Io { path: root.to_path_buf(), source })?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let class = entry.file_name().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = Vec::new();
        for file in read_dir(&path)? {
            let file = file.map_err(|source| DataError::Io { path: path.clone(), source })?;
            let fpath = file.path();
            if fpath.is_file() && has_image_ext(&fpath) {
                // Store paths relative to the root for portable manifests.
                files.push(PathBuf::from(&class).join(file.file_name()));
            }
        }
        if !files.is_empty() {
            files.sort();
            classes.push((class, files));
        }
    }
    classes.sort_by(|a, b| a.0.cmp(&b.0));

    if n_images == 0 {
        return Ok(Vec::new());
    }
    if classes.is_empty() {
        return Err(DataError::EmptyDataset { root: root.to_path_buf() });
    }
    let available: usize = classes.iter().map(|(_, files)| files.len()).sum();
    if available < n_images {
        return Err(DataError::NotEnoughImages { requested: n_images, available });
    }

    // Shuffle within each class and shuffle class visiting order, then
    // deal one image per class round-robin until n_images are drawn.
    // Classes with equal supply end up within one image of each other.
    for (idx, (_, files)) in classes.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::DatasetSample, idx as u64 + 1));
        files.shuffle(&mut rng);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::DatasetSample, 0));
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(&mut rng);

    let mut records: Vec<ImageRecord> = Vec::with_capacity(n_images);
    let mut round = 0usize;
    while records.len() < n_images {
        let mut took_any = false;
        for &ci in &order {
            let (class, files) = &classes[ci];
            if let Some(rel_path) = files.get(round) {
                records.push(ImageRecord { rel_path: rel_path.clone(), class: class.clone() });
                took_any = true;
                if records.len() == n_images {
                    break;
                }
            }
        }
        debug_assert!(took_any, "supply was checked above");
        if !took_any {
            break;
        }
        round += 1;
    }

    records.shuffle(&mut rng);
    Ok(records)
}

/// Partition `records` into `k + 1` disjoint equal pools in list order
/// (pool 0 is the cover pool); remainder records are dropped.
pub fn split_dataset(records: &[ImageRecord], k: usize) -> Result<DatasetSplit, DataError> {
    split_dataset_with_mode(records, k, SplitMode::Disjoint)
}

/// [`split_dataset`] with an explicit [`SplitMode`].
pub fn split_dataset_with_mode(
    records: &[ImageRecord],
    k: usize,
    mode: SplitMode,
) -> Result<DatasetSplit, DataError> {
    if k == 0 {
        return Err(DataError::NoSecrets);
    }
    match mode {
        SplitMode::Disjoint => {
            let pool_len = records.len() / (k + 1);
            if pool_len == 0 {
                return Err(DataError::TooFewRecords { records: records.len(), pools: k + 1 });
            }
            let pool = |i: usize| records[i * pool_len..(i + 1) * pool_len].to_vec();
            Ok(DatasetSplit {
                cover_pool: pool(0),
                secret_pools: (1..=k).map(pool).collect(),
            })
        }
        SplitMode::SharedSecrets => {
            let half = records.len() / 2;
            if half == 0 {
                return Err(DataError::TooFewRecords { records: records.len(), pools: 2 });
            }
            let secrets = records[..half].to_vec();
            Ok(DatasetSplit {
                cover_pool: records[half..2 * half].to_vec(),
                secret_pools: vec![secrets; k],
            })
        }
    }
}

/// Write a split as `pool_index<TAB>relative_path` lines (pool 0 is the
/// cover pool, pools 1..=k the secret pools).
pub fn write_split_manifest(split: &DatasetSplit, path: &Path) -> Result<(), DataError> {
    let mut text = String::new();
    for rec in &split.cover_pool {
        let _ = writeln!(text, "0\t{}", rec.rel_path.display());
    }
    for (i, pool) in split.secret_pools.iter().enumerate() {
        for rec in pool {
            let _ = writeln!(text, "{}\t{}", i + 1, rec.rel_path.display());
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Decode an image file to 8-bit RGB, converting (with a logged warning)
/// from other color types. No resizing.
pub fn load_rgb8(path: &Path) -> Result<RgbImage, DataError> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => DataError::Io { path: path.to_path_buf(), source: e },
        other => DataError::Decode { path: path.to_path_buf(), source: other },
    })?;
    if img.color() != image::ColorType::Rgb8 {
        log::warn!("{}: converting {:?} to 8-bit RGB", path.display(), img.color());
    }
    Ok(img.to_rgb8())
}

/// Convert an 8-bit RGB image to an `(h, w, 3)` tensor in `[0, 1]`.
pub fn tensor_from_rgb8(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Convert an `(h, w, 3)` tensor to 8-bit RGB by clamping to `[0, 1]`
/// and rounding to the nearest byte.
pub fn rgb8_from_tensor(tensor: ArrayView3<f32>) -> RgbImage {
    let (h, w, c) = tensor.dim();
    assert_eq!(c, 3, "expected an RGB tensor, got {c} channels");
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = tensor[(y as usize, x as usize, ch)].clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Load one image as a 64x64x3 tensor in `[0, 1]`.
///
/// Non-RGB inputs are converted with a warning; non-64x64 inputs are
/// bilinearly resized with a warning.
pub fn load_image(path: &Path) -> Result<Array3<f32>, DataError> {
    let img = load_rgb8(path)?;
    let tensor = tensor_from_rgb8(&img);
    let (h, w, _) = tensor.dim();
    if (h, w) == (IMAGE_SIZE, IMAGE_SIZE) {
        Ok(tensor)
    } else {
        log::warn!("{}: resizing {w}x{h} to {IMAGE_SIZE}x{IMAGE_SIZE}", path.display());
        Ok(bilinear_resize(tensor.view(), IMAGE_SIZE, IMAGE_SIZE))
    }
}

/// Write an `(h, w, 3)` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_image(tensor: ArrayView3<f32>, path: &Path) -> Result<(), DataError> {
    rgb8_from_tensor(tensor)
        .save(path)
        .map_err(|source| DataError::Encode { path: path.to_path_buf(), source })
}

/// Bilinear resize with half-pixel-centered sampling and edge clamping.
/// Interpolation runs in `f64` and rounds once at the end.
pub fn bilinear_resize(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (in_h, in_w, channels) = src.dim();
    assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0);
    let scale_y = in_h as f64 / out_h as f64;
    let scale_x = in_w as f64 / out_w as f64;
    Array3::from_shape_fn((out_h, out_w, channels), |(oy, ox, c)| {
        let sy = (oy as f64 + 0.5) * scale_y - 0.5;
        let sx = (ox as f64 + 0.5) * scale_x - 0.5;
        let y0 = sy.floor();
        let x0 = sx.floor();
        let wy = sy - y0;
        let wx = sx - x0;
        let clamp_y = |y: f64| (y.max(0.0) as usize).min(in_h - 1);
        let clamp_x = |x: f64| (x.max(0.0) as usize).min(in_w - 1);
        let (y0c, y1c) = (clamp_y(y0), clamp_y(y0 + 1.0));
        let (x0c, x1c) = (clamp_x(x0), clamp_x(x0 + 1.0));
        let at = |y: usize, x: usize| f64::from(src[(y, x, c)]);
        let top = at(y0c, x0c) * (1.0 - wx) + at(y0c, x1c) * wx;
        let bottom = at(y1c, x0c) * (1.0 - wx) + at(y1c, x1c) * wx;
        (top * (1.0 - wy) + bottom * wy) as f32
    })
}

/// A split with every image decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub cover: Vec<Array3<f32>>,
    pub secrets: Vec<Vec<Array3<f32>>>,
}

impl LoadedSplit {
    /// Images per pool.
    pub fn pool_len(&self) -> usize {
        self.cover.len()
    }

    /// Number of secrets `k`.
    pub fn k(&self) -> usize {
        self.secrets.len()
    }

    /// Wrap pre-built tensors, validating equal pool lengths.
    pub fn from_tensors(
        cover: Vec<Array3<f32>>,
        secrets: Vec<Vec<Array3<f32>>>,
    ) -> Result<Self, DataError> {
        if secrets.is_empty() {
            return Err(DataError::NoSecrets);
        }
        if secrets.iter().any(|p| p.len() != cover.len()) {
            return Err(DataError::ShapeMismatch {
                context: "loaded split pools",
                expected: format!("{} images per pool", cover.len()),
                got: format!("{:?}", secrets.iter().map(Vec::len).collect::<Vec<_>>()),
            });
        }
        Ok(Self { cover, secrets })
    }
}

/// Load every record of `split` (paths relative to `root`) as a 64x64x3
/// tensor.
pub fn load_split(root: &Path, split: &DatasetSplit) -> Result<LoadedSplit, DataError> {
    let load_pool = |pool: &[ImageRecord]| -> Result<Vec<Array3<f32>>, DataError> {
        pool.iter().map(|rec| load_image(&root.join(&rec.rel_path))).collect()
    };
    Ok(LoadedSplit {
        cover: load_pool(&split.cover_pool)?,
        secrets: split.secret_pools.iter().map(|p| load_pool(p)).collect::<Result<_, _>>()?,
    })
}

/// Stack single-image tensors into one NHWC batch.
///
/// Panics if the slice is empty or shapes differ; callers own that
/// validation (pools are shape-checked at load time).
pub fn stack_images(images: &[&Array3<f32>]) -> Array4<f32> {
    let (h, w, c) = images[0].dim();
    let mut out = Array4::zeros((images.len(), h, w, c));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}

/// Streams one epoch of aligned [`StegoBatch`]es from a loaded split.
///
/// With `shuffle`, each pool is permuted independently under a
/// deterministic generator derived from `seed`; without it, pools are
/// traversed in order. The final short batch is yielded, not dropped.
pub struct BatchIterator<'a> {
    split: &'a LoadedSplit,
    orders: Vec<Vec<usize>>,
    batch_size: usize,
    pos: usize,
}

/// Create a [`BatchIterator`]; see the type docs. An empty split yields
/// an empty stream.
pub fn batch_iterator(
    split: &LoadedSplit,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> BatchIterator<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let n = split.pool_len();
    let orders = (0..=split.k())
        .map(|pool_idx| {
            let mut order: Vec<usize> = (0..n).collect();
            if shuffle {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    seed,
                    Stream::BatchShuffle,
                    pool_idx as u64,
                ));
                order.shuffle(&mut rng);
            }
            order
        })
        .collect();
    BatchIterator { split, orders, batch_size, pos: 0 }
}

impl Iterator for BatchIterator<'_> {
    type Item = StegoBatch<f32>;

    fn next(&mut self) -> Option<StegoBatch<f32>> {
        let n = self.split.pool_len();
        if self.pos >= n {
            return None;
        }
        let end = (self.pos + self.batch_size).min(n);
        let gather = |pool: &[Array3<f32>], order: &[usize]| {
            let refs: Vec<&Array3<f32>> = order[self.pos..end].iter().map(|&i| &pool[i]).collect();
            stack_images(&refs)
        };
        let cover = gather(&self.split.cover, &self.orders[0]);
        let secrets = self
            .split
            .secrets
            .iter()
            .zip(&self.orders[1..])
            .map(|(pool, order)| gather(pool, order))
            .collect();
        self.pos = end;
        Some(StegoBatch::new(cover, secrets).expect("pools are shape-checked at load time"))
    }
}
