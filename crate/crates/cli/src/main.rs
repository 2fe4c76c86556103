//! `deepsteg` command line: train a model, hide and reveal images with
//! it, evaluate quality, run the LSB baseline, and self-check
//! gradients.
//!
//! Every subcommand writes a manifest (`manifest.json` in its output
//! directory, or `<output>.manifest.json` beside a single output file)
//! recording the resolved configuration, the seeds, and the artifact
//! paths, so a run can be reproduced from its manifest alone. Exit
//! codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use deepsteg::codec::{
    decode_file, encode_file, lsb_embed_files, lsb_extract_files, LsbPlan, QuantMode, QuantPolicy,
};
use deepsteg::data::{
    build_dataset, load_split, split_dataset_with_mode, write_split_manifest, SplitMode, StegoBatch,
};
use deepsteg::metrics::{evaluate_dataset, write_diff_images};
use deepsteg::net::{NetworkSpec, StegoModel};
use deepsteg::train::{grad_check, Checkpoint, TrainConfig, TrainOutputs, Trainer};

#[derive(Parser)]
#[command(name = "deepsteg", version, about = "Hide images inside images with trained networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an image dataset and write a checkpoint.
    Train(TrainArgs),
    /// Hide secret images in a cover using a trained model.
    Encode(EncodeArgs),
    /// Recover the secrets from a container image.
    Decode(DecodeArgs),
    /// Report MSE/PSNR/SSIM over sampled dataset tuples.
    Evaluate(EvaluateArgs),
    /// Baseline: pack secret top bits into the cover's low bits.
    LsbEncode(LsbEncodeArgs),
    /// Baseline: extract LSB-packed secrets from a container.
    LsbDecode(LsbDecodeArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

/// Training flags mirror the config-file keys one to one. Precedence,
/// lowest to highest: built-in defaults, `--config` file, `STEG_*`
/// environment variables, these flags.
#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the checkpoint, history CSV, split manifest, and
    /// run manifest.
    #[arg(long, default_value = "runs/train")]
    out_dir: PathBuf,
    /// Secrets hidden per cover (k).
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the cover/container loss term.
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Weight of each secret reconstruction loss term.
    #[arg(long)]
    lambda_s: Option<f64>,
    /// Stddev of the noise added to the container during training.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Learning-rate milestones as `epoch:rate,...`,
    /// e.g. `0:0.001,200:0.0003`.
    #[arg(long)]
    lr_milestones: Option<String>,
    /// Epochs in the large-batch phase.
    #[arg(long)]
    phase1_epochs: Option<usize>,
    /// Batch size of the large-batch phase.
    #[arg(long)]
    phase1_batch: Option<usize>,
    /// Epochs in the small-batch fine-tuning phase.
    #[arg(long)]
    phase2_epochs: Option<usize>,
    /// Batch size of the fine-tuning phase.
    #[arg(long)]
    phase2_batch: Option<usize>,
    /// Base seed for weights, shuffling, sampling, and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root with one subdirectory per class.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Images to sample (class-balanced) from the dataset root.
    #[arg(long)]
    n_images: Option<usize>,
    /// Pool layout: `disjoint` or `shared-secrets`.
    #[arg(long, value_parser = parse_split_mode)]
    split_mode: Option<SplitMode>,
    /// Epochs between rolling checkpoint writes (0 = end only).
    #[arg(long)]
    checkpoint_interval: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Cover image (PNG/JPEG; resized to 64x64 if needed).
    #[arg(long)]
    cover: PathBuf,
    /// One secret image per flag, in decode order (repeat k times).
    #[arg(long = "secret", required = true)]
    secret: Vec<PathBuf>,
    /// Output container PNG.
    #[arg(long)]
    out: PathBuf,
    /// `quantize-8bit` (default) or `float-passthrough`.
    #[arg(long, default_value = "quantize-8bit", value_parser = parse_quant_mode)]
    quant_mode: QuantMode,
}

#[derive(Args)]
struct DecodeArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Container PNG produced by `encode`.
    #[arg(long)]
    container: PathBuf,
    /// Directory for `secret_1.png … secret_k.png`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset root; defaults to the checkpoint's training root.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Images sampled when rebuilding the dataset; defaults to the
    /// checkpoint's value.
    #[arg(long)]
    n_images: Option<usize>,
    /// Pool layout (`disjoint` or `shared-secrets`); defaults to the
    /// checkpoint's value.
    #[arg(long, value_parser = parse_split_mode)]
    split_mode: Option<SplitMode>,
    /// Tuples to sample per pool.
    #[arg(long, default_value_t = 16)]
    sample_count: usize,
    /// Tuple-sampling seed; defaults to the checkpoint's training seed.
    /// The cover/secret pools themselves always follow the checkpoint
    /// seed so they match the training split.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.csv, report.json, and diff images.
    #[arg(long, default_value = "runs/eval")]
    out_dir: PathBuf,
    /// Also write amplified |a−b| difference images per sampled pair.
    #[arg(long)]
    save_diffs: bool,
    /// Amplification for difference images (at least 1).
    #[arg(long, default_value_t = 5.0)]
    diff_gain: f64,
}

#[derive(Args)]
struct LsbEncodeArgs {
    /// Cover image; secrets must have the same dimensions.
    #[arg(long)]
    cover: PathBuf,
    /// One secret image per flag, in decode order.
    #[arg(long = "secret", required = true)]
    secret: Vec<PathBuf>,
    /// Output container PNG.
    #[arg(long)]
    out: PathBuf,
    /// Top bits kept per secret; k·bits may use at most 7 of the 8.
    #[arg(long, default_value_t = 2)]
    bits_per_secret: u8,
}

#[derive(Args)]
struct LsbDecodeArgs {
    /// Container PNG produced by `lsb-encode`.
    #[arg(long)]
    container: PathBuf,
    /// Directory for `secret_1.png … secret_k.png`.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of embedded secrets.
    #[arg(long)]
    k: usize,
    /// Bits per secret used at embed time.
    #[arg(long, default_value_t = 2)]
    bits_per_secret: u8,
}

/// Checks the analytic backward pass of a freshly initialized model
/// against central finite differences on a synthetic batch. Large
/// `--fd-step` values risk sweeping a ReLU kink into the probe window,
/// which shows up as spurious error on an otherwise correct gradient.
#[derive(Args)]
struct GradCheckArgs {
    /// Secrets hidden per cover (k).
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Side length of the synthetic probe images.
    #[arg(long, default_value_t = 8)]
    image_side: usize,
    /// Batch size of the synthetic probe batch.
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    /// Parameters to probe, sampled across the whole model.
    #[arg(long, default_value_t = 60)]
    probes: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Weight of the cover/container loss term.
    #[arg(long, default_value_t = 1.0)]
    lambda_c: f64,
    /// Weight of each secret reconstruction loss term.
    #[arg(long, default_value_t = 1.0)]
    lambda_s: f64,
    /// Seed for weights, probe inputs, and probe selection.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fail (exit 2) if the max relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Output report JSON.
    #[arg(long, default_value = "grad_check.json")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os()))
}

/// Parse and dispatch; 0 on success, 1 on usage errors, 2 on runtime
/// failures.
fn run(argv: impl IntoIterator<Item = OsString>) -> u8 {
    match Cli::try_parse_from(argv) {
        Ok(cli) => match dispatch(cli.command) {
            Ok(()) => 0,
            Err(err) => {
                eprintln!("error: {err:#}");
                2
            }
        },
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            code
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::LsbEncode(args) => cmd_lsb_encode(args),
        Command::LsbDecode(args) => cmd_lsb_decode(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&args)?;
    log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let records = build_dataset(&cfg.data_root, cfg.n_images, cfg.seed)?;
    let split = split_dataset_with_mode(&records, cfg.secret_count, cfg.split_mode)?;
    let split_path = args.out_dir.join("split.tsv");
    write_split_manifest(&split, &split_path)?;
    let loaded = load_split(&cfg.data_root, &split)?;

    let outputs = TrainOutputs {
        checkpoint_path: args.out_dir.join("model.ckpt"),
        history_path: Some(args.out_dir.join("history.csv")),
    };
    let mut trainer: Trainer<f32> = Trainer::new(cfg.clone())?;
    let ck = trainer.train(&loaded, Some(&outputs))?;

    let manifest = json!({
        "subcommand": "train",
        "config": cfg,
        "seeds": { "base": cfg.seed },
        "artifacts": {
            "checkpoint": outputs.checkpoint_path,
            "history": outputs.history_path,
            "split_manifest": split_path,
        },
        "epochs_completed": ck.epoch,
        "final_loss": ck.history.last().map(|r| r.total),
    });
    write_manifest(&args.out_dir.join("manifest.json"), &manifest)
}

/// Apply the config sources in precedence order and validate once.
fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(v) = args.k {
        cfg.secret_count = v;
    }
    if let Some(v) = args.lambda_c {
        cfg.lambda_c = v;
    }
    if let Some(v) = args.lambda_s {
        cfg.lambda_s = v;
    }
    if let Some(v) = args.noise_std {
        cfg.noise_std = v;
    }
    if let Some(s) = &args.lr_milestones {
        cfg.apply_kv("lr_milestones", s)?;
    }
    if let Some(v) = args.phase1_epochs {
        cfg.phase1_epochs = v;
    }
    if let Some(v) = args.phase1_batch {
        cfg.phase1_batch = v;
    }
    if let Some(v) = args.phase2_epochs {
        cfg.phase2_epochs = v;
    }
    if let Some(v) = args.phase2_batch {
        cfg.phase2_batch = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(p) = &args.data_root {
        cfg.data_root = p.clone();
    }
    if let Some(v) = args.n_images {
        cfg.n_images = v;
    }
    if let Some(m) = args.split_mode {
        cfg.split_mode = m;
    }
    if let Some(v) = args.checkpoint_interval {
        cfg.checkpoint_interval = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.model)?;
    ensure_parent(&args.out)?;
    let policy = QuantPolicy { mode: args.quant_mode };
    let summary = encode_file(&ck.model, &args.cover, &args.secret, &args.out, policy)?;
    log::info!(
        "container written to {} (cover MSE {:.3e} pre-quantization, {:.3e} post)",
        summary.container_path.display(),
        summary.mse_pre_quant,
        summary.mse_post_quant
    );
    let manifest = json!({
        "subcommand": "encode",
        "config": {
            "model": args.model,
            "cover": args.cover,
            "secrets": args.secret,
            "quant_mode": args.quant_mode.as_str(),
            "secret_count": ck.model.secret_count(),
        },
        "seeds": {},
        "artifacts": { "container": summary.container_path },
        "quality": {
            "cover_mse_pre_quant": summary.mse_pre_quant,
            "cover_mse_post_quant": summary.mse_post_quant,
        },
    });
    write_manifest(&manifest_beside(&args.out), &manifest)
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.model)?;
    let paths = decode_file(&ck.model, &args.container, &args.out_dir)?;
    log::info!("decoded {} secrets into {}", paths.len(), args.out_dir.display());
    let manifest = json!({
        "subcommand": "decode",
        "config": {
            "model": args.model,
            "container": args.container,
            "secret_count": ck.model.secret_count(),
        },
        "seeds": {},
        "artifacts": { "secrets": paths },
    });
    write_manifest(&args.out_dir.join("manifest.json"), &manifest)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if args.save_diffs && !(args.diff_gain >= 1.0 && args.diff_gain.is_finite()) {
        bail!("--diff-gain must be a finite value of at least 1, got {}", args.diff_gain);
    }
    let ck = Checkpoint::load(&args.model)?;
    let data_root = args.data_root.clone().unwrap_or_else(|| ck.config.data_root.clone());
    let n_images = args.n_images.unwrap_or(ck.config.n_images);
    let split_mode = args.split_mode.unwrap_or(ck.config.split_mode);
    let seed = args.seed.unwrap_or(ck.config.seed);

    // Pools are rebuilt under the checkpoint's own seed so cover/secret
    // roles match the training split; `seed` only drives tuple sampling.
    let records = build_dataset(&data_root, n_images, ck.config.seed)?;
    let split = split_dataset_with_mode(&records, ck.config.secret_count, split_mode)?;
    let loaded = load_split(&data_root, &split)?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let checkpoint_id = args.model.display().to_string();
    let report = evaluate_dataset(&ck.model, &loaded, args.sample_count, seed, &checkpoint_id)?;
    let csv_path = args.out_dir.join("report.csv");
    let json_path = args.out_dir.join("report.json");
    report.write_csv(&csv_path)?;
    report.write_json(&json_path)?;
    for s in &report.summaries {
        log::info!(
            "{}: mean mse {:.4e}, psnr {:.2} dB, ssim {:.4} over {} pairs",
            s.role,
            s.mean.mse,
            s.mean.psnr,
            s.mean.ssim,
            s.count
        );
    }

    let diff_paths = if args.save_diffs {
        write_diff_images(&ck.model, &loaded, args.sample_count, seed, args.diff_gain, &args.out_dir)?
    } else {
        Vec::new()
    };

    let manifest = json!({
        "subcommand": "evaluate",
        "config": {
            "model": args.model,
            "data_root": data_root,
            "n_images": n_images,
            "split_mode": split_mode.as_str(),
            "sample_count": report.sample_count,
            "diff_gain": args.save_diffs.then_some(args.diff_gain),
        },
        "seeds": { "sampling": seed, "split": ck.config.seed },
        "artifacts": {
            "report_csv": csv_path,
            "report_json": json_path,
            "diff_images": diff_paths,
        },
    });
    write_manifest(&args.out_dir.join("manifest.json"), &manifest)
}

fn cmd_lsb_encode(args: LsbEncodeArgs) -> Result<()> {
    let plan = LsbPlan::new(args.secret.len(), args.bits_per_secret)?;
    ensure_parent(&args.out)?;
    lsb_embed_files(&args.cover, &args.secret, &args.out, plan)?;
    log::info!(
        "container written to {} (cover keeps {} top bits)",
        args.out.display(),
        plan.cover_bits_kept()
    );
    let manifest = json!({
        "subcommand": "lsb-encode",
        "config": {
            "cover": args.cover,
            "secrets": args.secret,
            "bits_per_secret": args.bits_per_secret,
            "cover_bits_kept": plan.cover_bits_kept(),
        },
        "seeds": {},
        "artifacts": { "container": args.out },
    });
    write_manifest(&manifest_beside(&args.out), &manifest)
}

fn cmd_lsb_decode(args: LsbDecodeArgs) -> Result<()> {
    let plan = LsbPlan::new(args.k, args.bits_per_secret)?;
    let paths = lsb_extract_files(&args.container, &args.out_dir, plan)?;
    log::info!("extracted {} secrets into {}", paths.len(), args.out_dir.display());
    let manifest = json!({
        "subcommand": "lsb-decode",
        "config": {
            "container": args.container,
            "k": args.k,
            "bits_per_secret": args.bits_per_secret,
        },
        "seeds": {},
        "artifacts": { "secrets": paths },
    });
    write_manifest(&args.out_dir.join("manifest.json"), &manifest)
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let model: StegoModel<f64> = StegoModel::init(&NetworkSpec::new(args.k), args.seed);
    // Inputs sit well inside [0,1] so activations are of ordinary size.
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut tensor = || {
        Array4::from_shape_simple_fn((args.batch_size, args.image_side, args.image_side, 3), || {
            0.1 + 0.8 * rng.random::<f64>()
        })
    };
    let cover = tensor();
    let secrets: Vec<Array4<f64>> = (0..args.k).map(|_| tensor()).collect();
    let batch = StegoBatch::new(cover, secrets)?;
    let report =
        grad_check(&model, &batch, args.lambda_c, args.lambda_s, args.probes, args.fd_step, args.seed)?;

    ensure_parent(&args.out)?;
    std::fs::write(&args.out, format!("{:#}\n", serde_json::to_value(&report)?))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let manifest = json!({
        "subcommand": "grad-check",
        "config": {
            "k": args.k,
            "image_side": args.image_side,
            "batch_size": args.batch_size,
            "probes": args.probes,
            "fd_step": args.fd_step,
            "lambda_c": args.lambda_c,
            "lambda_s": args.lambda_s,
            "tolerance": args.tol,
        },
        "seeds": { "base": args.seed },
        "artifacts": { "report": args.out },
        "max_rel_err": report.max_rel_err,
    });
    write_manifest(&manifest_beside(&args.out), &manifest)?;

    let worst = report.worst().expect("grad_check guarantees at least one probe");
    println!(
        "max relative error {:.3e} over {} probes (worst: {}[{}])",
        report.max_rel_err,
        report.probes.len(),
        worst.name,
        worst.flat_index
    );
    if report.max_rel_err > args.tol {
        bail!(
            "gradient check failed: {:.3e} exceeds tolerance {:.1e} at {}[{}] \
             (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_err,
            args.tol,
            worst.name,
            worst.flat_index,
            worst.analytic,
            worst.numeric
        );
    }
    Ok(())
}

/// `<output>.manifest.json` next to a single-file output.
fn manifest_beside(output: &Path) -> PathBuf {
    output.with_extension("manifest.json")
}

fn write_manifest(path: &Path, manifest: &serde_json::Value) -> Result<()> {
    std::fs::write(path, format!("{manifest:#}\n"))
        .with_context(|| format!("writing manifest {}", path.display()))?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

fn parse_split_mode(s: &str) -> Result<SplitMode, String> {
    s.parse()
}

fn parse_quant_mode(s: &str) -> Result<QuantMode, String> {
    s.parse()
}
