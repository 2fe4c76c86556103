//! Losses, learning-rate schedule, and the two-phase training loop.
//!
//! # Loss
//!
//! The training objective for one batch is
//!
//! ```text
//! L = λ_c · ‖container − cover‖²  +  Σ_i λ_s · ‖decoded_i − secret_i‖²
//! ```
//!
//! where each `‖·‖²` is the sum of squared error over all pixels and
//! channels, averaged over the batch ([`sse_mean`]). This is a *sum*
//! per image, not a per-element mean — at 64×64×3 the terms are of
//! order 10³–10⁴ early in training. Per-element means live in
//! [`crate::metrics::eval_mse`] and are only used for evaluation; the
//! two scales must not be mixed.
//!
//! # Two-phase step
//!
//! Every batch takes two optimizer steps on two disjoint parameter
//! sets, sharing one encoder pass:
//!
//! 1. encode once; add Gaussian readout noise to the container
//!    ([`add_noise`]);
//! 2. **reveal step** ([`Trainer::step_reveal`]): descend
//!    `Σ λ_s ‖decoded_i − secret_i‖²` on the reveal networks only;
//! 3. **full step** ([`Trainer::step_full`]): descend the complete
//!    loss on the prep and hiding networks only, backpropagating
//!    *through* the (frozen, freshly updated) reveal networks.
//!
//! The cover term always compares the *clean* container against the
//! cover; the secret terms always decode the *noisy* container, so the
//! decoders never see a noiseless input during training.
//!
//! Training runs two phases that differ only in batch size (large
//! batches first, then small ones for fine-tuning); the epoch counter
//! and learning-rate schedule run straight through both.

mod adam;
mod checkpoint;
mod grad;

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array4, ArrayView4, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_iterator, DataError, LoadedSplit, SplitMode, StegoBatch};
use crate::net::{AggGrads, EncodeTrace, NetError, NetworkSpec, StegoModel, IMAGE_CHANNELS};
use crate::seeds::{self, Stream};

pub use adam::AdamParams;
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grad::{grad_check, relative_error, GradCheckReport, ProbeResult};

use adam::AdamState;

/// Errors from configuration, loss evaluation, or the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in {context} ({value}); try a lower learning rate")]
    NonFiniteLoss { context: &'static str, value: f64 },
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch { context: &'static str, expected: String, got: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("failed to write {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Everything that defines a training run. All fields have sensible
/// defaults and can be overridden, in increasing precedence, by a
/// config file ([`TrainConfig::from_file`]), `STEG_*` environment
/// variables ([`TrainConfig::apply_env`]), and CLI flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of secret images hidden per cover (`k`).
    pub secret_count: usize,
    /// Weight of the cover/container error term.
    pub lambda_c: f64,
    /// Weight of each secret reconstruction term.
    pub lambda_s: f64,
    /// Standard deviation of the Gaussian noise added to the container
    /// before decoding during training (0 disables it).
    pub noise_std: f64,
    /// Piecewise-constant learning-rate schedule as `(epoch, lr)`
    /// milestones; each rate applies from its epoch (inclusive) until
    /// the next milestone.
    pub lr_milestones: Vec<(usize, f64)>,
    /// Epochs and batch size of the large-batch phase.
    pub phase1_epochs: usize,
    pub phase1_batch: usize,
    /// Epochs and batch size of the small-batch fine-tuning phase.
    pub phase2_epochs: usize,
    pub phase2_batch: usize,
    /// Base seed; every random stream (weights, shuffling, noise,
    /// sampling) is derived from it.
    pub seed: u64,
    /// Dataset root: one subdirectory per class.
    pub data_root: PathBuf,
    /// Images to sample from the dataset root.
    pub n_images: usize,
    /// How sampled records are partitioned into cover/secret pools.
    pub split_mode: SplitMode,
    /// Write a rolling checkpoint every this many epochs (0 = only at
    /// the end).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            secret_count: 3,
            lambda_c: 1.0,
            lambda_s: 1.0,
            noise_std: 0.01,
            lr_milestones: vec![(0, 1e-3), (200, 3e-4), (400, 3e-5)],
            phase1_epochs: 750,
            phase1_batch: 256,
            phase2_epochs: 400,
            phase2_batch: 32,
            seed: 42,
            data_root: PathBuf::from("data"),
            n_images: 2000,
            split_mode: SplitMode::Disjoint,
            checkpoint_interval: 100,
        }
    }
}

/// Config keys accepted by [`TrainConfig::apply_kv`]; must stay in sync
/// with its match arms. `apply_env` uses this list to skip foreign
/// `STEG_*` variables with a warning instead of failing.
const CONFIG_KEYS: &[&str] = &[
    "secret_count",
    "k",
    "lambda_c",
    "lambda_s",
    "noise_std",
    "lr_milestones",
    "phase1_epochs",
    "phase1_batch",
    "phase2_epochs",
    "phase2_batch",
    "seed",
    "data_root",
    "n_images",
    "split_mode",
    "checkpoint_interval",
];

impl TrainConfig {
    /// Network architecture implied by this config.
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.secret_count)
    }

    /// Total epochs across both phases.
    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.secret_count == 0 {
            return fail("secret_count must be at least 1".into());
        }
        if !(self.lambda_c > 0.0) || !(self.lambda_s > 0.0) {
            return fail(format!(
                "loss weights must be positive (lambda_c={}, lambda_s={})",
                self.lambda_c, self.lambda_s
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return fail(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        if self.lr_milestones.is_empty() {
            return fail("lr_milestones must not be empty".into());
        }
        if self.lr_milestones[0].0 != 0 {
            return fail(format!(
                "first lr milestone must start at epoch 0, got {}",
                self.lr_milestones[0].0
            ));
        }
        for pair in self.lr_milestones.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return fail(format!(
                    "lr milestone epochs must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                ));
            }
        }
        if let Some((epoch, lr)) = self.lr_milestones.iter().find(|(_, lr)| !(*lr > 0.0) || !lr.is_finite()) {
            return fail(format!("learning rate at milestone {epoch} must be positive, got {lr}"));
        }
        if self.phase1_batch == 0 || self.phase2_batch == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        if self.total_epochs() == 0 {
            return fail("phase1_epochs + phase2_epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file. `#` starts a comment;
    /// blank lines are ignored. Unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<TrainConfig, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let located = |msg: String| {
                TrainError::InvalidConfig(format!("{}:{}: {msg}", path.display(), lineno + 1))
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| located(format!("expected key = value, got {line:?}")))?;
            cfg.apply_kv(key.trim(), value.trim()).map_err(|e| match e {
                TrainError::InvalidConfig(msg) => located(msg),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` override. `k` is accepted as an alias
    /// for `secret_count`. Values use the same syntax as the config
    /// file (e.g. `lr_milestones = 0:0.001,200:0.0003`).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "secret_count" | "k" => self.secret_count = parse_value(key, value)?,
            "lambda_c" => self.lambda_c = parse_value(key, value)?,
            "lambda_s" => self.lambda_s = parse_value(key, value)?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "lr_milestones" => self.lr_milestones = parse_milestones(value)?,
            "phase1_epochs" => self.phase1_epochs = parse_value(key, value)?,
            "phase1_batch" => self.phase1_batch = parse_value(key, value)?,
            "phase2_epochs" => self.phase2_epochs = parse_value(key, value)?,
            "phase2_batch" => self.phase2_batch = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "n_images" => self.n_images = parse_value(key, value)?,
            "split_mode" => self.split_mode = value.parse().map_err(TrainError::InvalidConfig)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, value)?,
            other => {
                return Err(TrainError::InvalidConfig(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Apply `STEG_<KEY>` environment overrides (e.g. `STEG_SEED=7`,
    /// `STEG_SECRET_COUNT=2`). `STEG_`-prefixed variables that do not
    /// name a config key are skipped with a warning; malformed values
    /// for known keys are errors.
    pub fn apply_env(&mut self) -> Result<(), TrainError> {
        self.apply_env_from(std::env::vars())
    }

    fn apply_env_from(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), TrainError> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("STEG_") else { continue };
            let key = rest.to_ascii_lowercase();
            if !CONFIG_KEYS.contains(&key.as_str()) {
                log::warn!("ignoring environment variable {name}: no such configuration key");
                continue;
            }
            self.apply_kv(&key, &value).map_err(|e| match e {
                TrainError::InvalidConfig(msg) => TrainError::InvalidConfig(format!("{name}: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| {
        TrainError::InvalidConfig(format!("bad value {value:?} for {key}: {e}"))
    })
}

/// Parse `epoch:lr` pairs separated by commas, e.g.
/// `0:0.001,200:0.0003,400:0.00003`.
fn parse_milestones(value: &str) -> Result<Vec<(usize, f64)>, TrainError> {
    value
        .split(',')
        .map(|pair| {
            let (epoch, lr) = pair.split_once(':').ok_or_else(|| {
                TrainError::InvalidConfig(format!(
                    "bad lr milestone {pair:?} (expected epoch:lr)"
                ))
            })?;
            Ok((parse_value("lr_milestones epoch", epoch.trim())?, parse_value("lr_milestones rate", lr.trim())?))
        })
        .collect()
}

/// Learning rate for `epoch` under piecewise-constant `milestones`:
/// the rate of the last milestone whose epoch is `<= epoch`.
pub fn lr_schedule(epoch: usize, milestones: &[(usize, f64)]) -> f64 {
    assert!(!milestones.is_empty(), "lr schedule needs at least one milestone");
    milestones
        .iter()
        .take_while(|(start, _)| *start <= epoch)
        .last()
        .unwrap_or(&milestones[0])
        .1
}

/// One batch's loss, split into its weighted terms;
/// `total = cover_term + Σ secret_terms` by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub cover_term: f64,
    /// One reconstruction term per secret, in secret order.
    pub secret_terms: Vec<f64>,
}

impl LossReport {
    pub fn new(cover_term: f64, secret_terms: Vec<f64>) -> LossReport {
        let total = cover_term + secret_terms.iter().sum::<f64>();
        LossReport { total, cover_term, secret_terms }
    }

    /// Report for the reveal-only objective; the cover term is not part
    /// of that loss and is recorded as zero.
    pub fn reveal_only(secret_terms: Vec<f64>) -> LossReport {
        LossReport::new(0.0, secret_terms)
    }
}

/// Sum of squared error over all pixels and channels, averaged over the
/// batch axis only. Accumulates in `f64` regardless of `F`.
pub fn sse_mean<F: NdFloat>(a: ArrayView4<F>, b: ArrayView4<F>) -> Result<f64, TrainError> {
    if a.dim() != b.dim() {
        return Err(TrainError::ShapeMismatch {
            context: "loss operands",
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    let mut sum = 0.0f64;
    ndarray::Zip::from(&a).and(&b).for_each(|&x, &y| {
        let d = (x - y).to_f64().unwrap();
        sum += d * d;
    });
    Ok(sum / a.dim().0 as f64)
}

/// The reveal-networks objective: `Σ_i λ_s ‖decoded_i − secret_i‖²`.
pub fn reveal_loss<F: NdFloat>(
    decoded: &[Array4<F>],
    secrets: &[Array4<F>],
    lambda_s: f64,
) -> Result<LossReport, TrainError> {
    if decoded.len() != secrets.len() {
        return Err(TrainError::ShapeMismatch {
            context: "reveal loss operands",
            expected: format!("{} decoded tensors", secrets.len()),
            got: format!("{}", decoded.len()),
        });
    }
    let terms = decoded
        .iter()
        .zip(secrets)
        .map(|(d, s)| Ok(lambda_s * sse_mean(d.view(), s.view())?))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(LossReport::reveal_only(terms))
}

/// The complete objective:
/// `λ_c ‖container − cover‖² + Σ_i λ_s ‖decoded_i − secret_i‖²`.
pub fn full_loss<F: NdFloat>(
    container: ArrayView4<F>,
    cover: ArrayView4<F>,
    decoded: &[Array4<F>],
    secrets: &[Array4<F>],
    lambda_c: f64,
    lambda_s: f64,
) -> Result<LossReport, TrainError> {
    let cover_term = lambda_c * sse_mean(container, cover)?;
    let reveal = reveal_loss(decoded, secrets, lambda_s)?;
    Ok(LossReport::new(cover_term, reveal.secret_terms))
}

/// Add i.i.d. Gaussian noise with standard deviation `sigma` to a
/// tensor. With `sigma == 0` this is a plain copy and consumes no
/// randomness.
pub fn add_noise<F: NdFloat, R: Rng + ?Sized>(
    x: ArrayView4<F>,
    sigma: f64,
    rng: &mut R,
) -> Array4<F> {
    let mut out = x.to_owned();
    if sigma == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is validated finite and non-negative");
    out.mapv_inplace(|v| v + F::from(normal.sample(rng)).unwrap());
    out
}

/// A traced encoder pass plus the noisy container both training steps
/// decode from. Produced by [`Trainer::encode_with_noise`].
pub struct EncodedBatch<F> {
    trace: EncodeTrace<F>,
    noisy_container: Array4<F>,
}

impl<F> EncodedBatch<F> {
    /// The clean (noise-free) container.
    pub fn container(&self) -> &Array4<F> {
        self.trace.container()
    }

    /// The container the reveal networks decode during training.
    pub fn noisy_container(&self) -> &Array4<F> {
        &self.noisy_container
    }
}

/// Output locations for [`Trainer::train`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    /// Rolling checkpoint, rewritten atomically every
    /// `checkpoint_interval` epochs and at the end.
    pub checkpoint_path: PathBuf,
    /// Optional per-epoch loss history CSV, rewritten alongside the
    /// checkpoint.
    pub history_path: Option<PathBuf>,
}

/// The two-phase training driver: model, two optimizers (one per
/// parameter set), and accumulated history.
pub struct Trainer<F = f32> {
    pub model: StegoModel<F>,
    pub config: TrainConfig,
    enc_opt: AdamState<F>,
    rev_opt: AdamState<F>,
    history: Vec<LossReport>,
    epoch: usize,
}

impl<F: NdFloat> Trainer<F> {
    /// Fresh trainer with a newly initialized model (weights seeded
    /// from `config.seed`).
    pub fn new(config: TrainConfig) -> Result<Trainer<F>, TrainError> {
        config.validate()?;
        let model = StegoModel::init(&config.spec(), config.seed);
        Trainer::with_model(model, config)
    }

    /// Trainer around an existing model (e.g. for continued training
    /// with altered hyperparameters).
    pub fn with_model(model: StegoModel<F>, config: TrainConfig) -> Result<Trainer<F>, TrainError> {
        config.validate()?;
        if model.secret_count() != config.secret_count {
            return Err(TrainError::InvalidConfig(format!(
                "model hides {} secrets but config says {}",
                model.secret_count(),
                config.secret_count
            )));
        }
        Ok(Trainer {
            model,
            config,
            enc_opt: AdamState::new(AdamParams::default()),
            rev_opt: AdamState::new(AdamParams::default()),
            history: Vec::new(),
            epoch: 0,
        })
    }

    /// Per-epoch mean losses recorded so far.
    pub fn history(&self) -> &[LossReport] {
        &self.history
    }

    /// Epochs completed.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Encode a batch and derive the noisy container used by both
    /// training steps.
    pub fn encode_with_noise<R: Rng + ?Sized>(
        &self,
        batch: &StegoBatch<F>,
        noise_rng: &mut R,
    ) -> Result<EncodedBatch<F>, TrainError> {
        let trace = self.model.encode_traced(batch)?;
        let noisy_container = add_noise(trace.container().view(), self.config.noise_std, noise_rng);
        Ok(EncodedBatch { trace, noisy_container })
    }

    /// Reveal step: one Adam update of the reveal networks against
    /// `Σ λ_s ‖decoded_i − secret_i‖²` on the noisy container. Prep and
    /// hiding parameters are untouched.
    pub fn step_reveal(
        &mut self,
        enc: &EncodedBatch<F>,
        batch: &StegoBatch<F>,
        lr: f64,
    ) -> Result<LossReport, TrainError> {
        let b = batch.batch_size();
        let lambda_s = self.config.lambda_s;
        let mut terms = Vec::with_capacity(self.model.secret_count());
        let mut all_grads: Vec<Vec<AggGrads<F>>> = Vec::with_capacity(self.model.secret_count());
        for (reveal, secret) in self.model.reveals.iter().zip(&batch.secrets) {
            let trace = reveal.forward_traced(enc.noisy_container.view())?;
            terms.push(lambda_s * sse_mean(trace.output().view(), secret.view())?);
            let d_out = loss_grad(trace.output().view(), secret.view(), lambda_s, b);
            let (_, grads) = reveal.backward(&trace, d_out, false, true);
            all_grads.push(grads.expect("parameter gradients were requested"));
        }
        let report = LossReport::reveal_only(terms);
        ensure_finite(&report, "reveal step")?;
        let flat = flatten_grads(&all_grads);
        self.rev_opt.step(self.model.reveal_convs_mut(), &flat, lr);
        Ok(report)
    }

    /// Full step: one Adam update of the prep and hiding networks
    /// against the complete loss, backpropagating through the frozen
    /// reveal networks (with the weights [`Self::step_reveal`] just
    /// produced). Returns the full-loss report for this batch.
    pub fn step_full(
        &mut self,
        enc: &EncodedBatch<F>,
        batch: &StegoBatch<F>,
        lr: f64,
    ) -> Result<LossReport, TrainError> {
        let b = batch.batch_size();
        let (lambda_c, lambda_s) = (self.config.lambda_c, self.config.lambda_s);
        let clean = enc.trace.container();

        // Container gradient: the cover term sees the clean container;
        // the secret terms reach it through the reveal networks (the
        // added noise is a constant offset, so its gradient is the
        // identity).
        let cover_term = lambda_c * sse_mean(clean.view(), batch.cover.view())?;
        let mut d_container = loss_grad(clean.view(), batch.cover.view(), lambda_c, b);
        let mut secret_terms = Vec::with_capacity(self.model.secret_count());
        for (reveal, secret) in self.model.reveals.iter().zip(&batch.secrets) {
            let trace = reveal.forward_traced(enc.noisy_container.view())?;
            secret_terms.push(lambda_s * sse_mean(trace.output().view(), secret.view())?);
            let d_out = loss_grad(trace.output().view(), secret.view(), lambda_s, b);
            let (dx, _) = reveal.backward(&trace, d_out, true, false);
            d_container += &dx.expect("input gradient was requested");
        }
        let report = LossReport::new(cover_term, secret_terms);
        ensure_finite(&report, "full step")?;

        // Through the hiding network, then split the input gradient's
        // channels among the prep networks ([cover ‖ prep_0 ‖ … ‖
        // prep_{k-1}]); the cover slice has no parameters upstream.
        let (d_hidden, hiding_grads) =
            self.model.hiding.backward(&enc.trace.hiding_trace, d_container, true, true);
        let d_hidden = d_hidden.expect("input gradient was requested");
        let agg = self.model.spec.branch.total_channels();
        let mut enc_grads: Vec<Vec<AggGrads<F>>> =
            Vec::with_capacity(self.model.secret_count() + 1);
        for (i, prep) in self.model.preps.iter().enumerate() {
            let lo = IMAGE_CHANNELS + i * agg;
            let d_prep = d_hidden.slice(s![.., .., .., lo..lo + agg]).to_owned();
            let (_, grads) = prep.backward(&enc.trace.prep_traces[i], d_prep, false, true);
            enc_grads.push(grads.expect("parameter gradients were requested"));
        }
        enc_grads.push(hiding_grads.expect("parameter gradients were requested"));
        let flat = flatten_grads(&enc_grads);
        self.enc_opt.step(self.model.encoder_convs_mut(), &flat, lr);
        Ok(report)
    }

    /// One complete training step on a batch: encode, reveal step,
    /// full step. Returns the full-loss report.
    pub fn train_batch<R: Rng + ?Sized>(
        &mut self,
        batch: &StegoBatch<F>,
        lr: f64,
        noise_rng: &mut R,
    ) -> Result<LossReport, TrainError> {
        let enc = self.encode_with_noise(batch, noise_rng)?;
        self.step_reveal(&enc, batch, lr)?;
        self.step_full(&enc, batch, lr)
    }
}

impl Trainer<f32> {
    /// Resume from a checkpoint. Optimizer moments are not stored in
    /// checkpoints, so Adam restarts its running averages.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Trainer<f32>, TrainError> {
        let Checkpoint { model, config, epoch, history } = ck;
        let mut trainer = Trainer::with_model(model, config)?;
        trainer.epoch = epoch;
        trainer.history = history;
        Ok(trainer)
    }

    /// Run the remaining epochs of both phases over `split`, writing
    /// rolling outputs if given, and return the final checkpoint.
    pub fn train(
        &mut self,
        split: &LoadedSplit,
        outputs: Option<&TrainOutputs>,
    ) -> Result<Checkpoint, TrainError> {
        if split.pool_len() == 0 {
            return Err(TrainError::InvalidConfig("training split has no images".into()));
        }
        if split.k() != self.model.secret_count() {
            return Err(TrainError::InvalidConfig(format!(
                "split provides {} secret pools but the model hides {}",
                split.k(),
                self.model.secret_count()
            )));
        }
        let total_epochs = self.config.total_epochs();
        for epoch in self.epoch..total_epochs {
            let phase1 = epoch < self.config.phase1_epochs;
            let batch_size =
                if phase1 { self.config.phase1_batch } else { self.config.phase2_batch };
            let lr = lr_schedule(epoch, &self.config.lr_milestones);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                self.config.seed,
                Stream::Noise,
                epoch as u64,
            ));
            let shuffle_seed = seeds::derive(self.config.seed, Stream::BatchShuffle, epoch as u64);

            let mut cover_sum = 0.0f64;
            let mut secret_sums = vec![0.0f64; self.model.secret_count()];
            let mut seen = 0usize;
            for batch in batch_iterator(split, batch_size, shuffle_seed, true) {
                let weight = batch.batch_size() as f64;
                let report = self.train_batch(&batch, lr, &mut noise_rng)?;
                cover_sum += report.cover_term * weight;
                for (sum, term) in secret_sums.iter_mut().zip(&report.secret_terms) {
                    *sum += term * weight;
                }
                seen += batch.batch_size();
            }
            let n = seen as f64;
            let mean = LossReport::new(
                cover_sum / n,
                secret_sums.iter().map(|s| s / n).collect(),
            );
            log::info!(
                "epoch {epoch} (phase {}): total={:.4} cover={:.4} lr={lr:e}",
                if phase1 { 1 } else { 2 },
                mean.total,
                mean.cover_term,
            );
            self.history.push(mean);
            self.epoch = epoch + 1;

            if let Some(out) = outputs {
                let interval = self.config.checkpoint_interval;
                if interval > 0 && self.epoch % interval == 0 && self.epoch != total_epochs {
                    self.write_outputs(out)?;
                }
            }
        }
        let ck = self.make_checkpoint();
        if let Some(out) = outputs {
            ck.save(&out.checkpoint_path)?;
            if let Some(history_path) = &out.history_path {
                write_history_csv(history_path, &self.history)?;
            }
        }
        Ok(ck)
    }

    /// Snapshot the current model, config, epoch, and history.
    pub fn make_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        }
    }

    fn write_outputs(&self, out: &TrainOutputs) -> Result<(), TrainError> {
        self.make_checkpoint().save(&out.checkpoint_path)?;
        if let Some(history_path) = &out.history_path {
            write_history_csv(history_path, &self.history)?;
        }
        Ok(())
    }
}

/// Gradient of `λ · ‖pred − target‖²` (batch-mean SSE) with respect to
/// `pred`: `2λ (pred − target) / batch`.
fn loss_grad<F: NdFloat>(
    pred: ArrayView4<F>,
    target: ArrayView4<F>,
    lambda: f64,
    batch: usize,
) -> Array4<F> {
    let scale = F::from(2.0 * lambda / batch as f64).unwrap();
    let mut g = pred.to_owned();
    g.zip_mut_with(&target, |p, &t| *p = (*p - t) * scale);
    g
}

fn ensure_finite(report: &LossReport, context: &'static str) -> Result<(), TrainError> {
    if !report.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { context, value: report.total });
    }
    Ok(())
}

/// Flatten per-stack, per-layer gradients into the flat
/// convolution-aligned list [`AdamState::step`] expects. Order matches
/// the stack order of `stacks` and branch order within each layer.
fn flatten_grads<F>(stacks: &[Vec<AggGrads<F>>]) -> Vec<(&Array4<F>, &Array1<F>)> {
    stacks
        .iter()
        .flat_map(|layers| layers.iter())
        .flat_map(|agg| agg.dw.iter().zip(agg.db.iter()))
        .collect()
}

/// Write per-epoch loss history as CSV:
/// `epoch,total,cover_term,secret_1,…,secret_k`.
pub fn write_history_csv(path: &Path, history: &[LossReport]) -> Result<(), TrainError> {
    let k = history.first().map_or(0, |r| r.secret_terms.len());
    let mut text = String::from("epoch,total,cover_term");
    for i in 1..=k {
        text.push_str(&format!(",secret_{i}"));
    }
    text.push('\n');
    for (epoch, report) in history.iter().enumerate() {
        text.push_str(&format!("{epoch},{},{}", report.total, report.cover_term));
        for term in &report.secret_terms {
            text.push_str(&format!(",{term}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}
