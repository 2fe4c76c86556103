//! Checkpoint serialization.
//!
//! A checkpoint is a single binary container:
//!
//! ```text
//! offset  size  content
//! 0       8     magic "DSTEGCKP"
//! 8       4     format version, u32 little-endian
//! 12      8     metadata length M, u64 little-endian
//! 20      M     metadata, JSON (spec, config, epoch, history,
//!               ordered parameter index with names and shapes)
//! 20+M    ...   parameter blocks: raw little-endian f32, C-order,
//!               concatenated in metadata index order
//! ```
//!
//! Parameter names follow the model traversal
//! (`prep0.layer0.branch0.weight`, `….bias`, …); the loader verifies
//! name, shape, and order against a model rebuilt from the stored spec,
//! so a file from a mismatched architecture fails loudly instead of
//! loading garbage. Optimizer moments are not stored: resuming restarts
//! Adam's running averages, which costs a few warm-up steps.
//!
//! Saves are atomic (write to a temp sibling, then rename), so a crash
//! mid-save never corrupts an existing checkpoint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{NetworkSpec, StegoModel};

use super::{LossReport, TrainConfig};

/// Magic bytes at offset 0.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSTEGCKP";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Errors from checkpoint IO.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to access checkpoint {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint {path} has format version {found}, this build supports {supported}")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },
}

/// A trained (or in-training) model plus everything needed to resume:
/// config, epoch counter, and per-epoch loss history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: StegoModel<f32>,
    pub config: TrainConfig,
    /// Epochs completed; training resumes from here.
    pub epoch: usize,
    pub history: Vec<LossReport>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    spec: NetworkSpec,
    config: TrainConfig,
    epoch: usize,
    history: Vec<LossReport>,
    params: Vec<ParamMeta>,
}

impl Checkpoint {
    /// Atomically write the checkpoint to `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };

        let mut params = Vec::new();
        for (name, conv) in self.model.named_convs() {
            params.push(ParamMeta { name: format!("{name}.weight"), shape: conv.weight.shape().to_vec() });
            params.push(ParamMeta { name: format!("{name}.bias"), shape: conv.bias.shape().to_vec() });
        }
        let meta = Meta {
            format_version: CHECKPOINT_VERSION,
            spec: self.model.spec.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            params,
        };
        let meta_bytes = serde_json::to_vec(&meta)
            .expect("checkpoint metadata is always serializable");

        let tmp_path = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp_path).map_err(io_err)?);
            w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
            w.write_all(&(meta_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(&meta_bytes).map_err(io_err)?;
            for (_, conv) in self.model.named_convs() {
                write_f32s(&mut w, conv.weight.as_slice().expect("standard layout")).map_err(io_err)?;
                write_f32s(&mut w, conv.bias.as_slice().expect("standard layout")).map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        std::fs::rename(&tmp_path, path).map_err(io_err)
    }

    /// Load a checkpoint, verifying magic, version, and the full
    /// parameter index. Truncated or mismatched files error without
    /// returning a partial model.
    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let corrupt = |reason: String| CheckpointError::Corrupt { path: path.to_path_buf(), reason };

        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic bytes (not a checkpoint file)".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word, path)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let mut long = [0u8; 8];
        read_exact(&mut r, &mut long, path)?;
        let meta_len = u64::from_le_bytes(long) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_bytes, path)?;
        let meta: Meta =
            serde_json::from_slice(&meta_bytes).map_err(|e| corrupt(format!("metadata: {e}")))?;
        if meta.format_version != version {
            return Err(corrupt(format!(
                "header version {version} disagrees with metadata version {}",
                meta.format_version
            )));
        }
        meta.spec.validate().map_err(|e| corrupt(format!("stored spec: {e}")))?;

        // Rebuild the model skeleton from the stored spec, then overwrite
        // every parameter in index order, verifying names and shapes.
        let mut model: StegoModel<f32> = StegoModel::init(&meta.spec, 0);
        let mut expected = Vec::new();
        for (name, conv) in model.named_convs() {
            expected.push((format!("{name}.weight"), conv.weight.shape().to_vec()));
            expected.push((format!("{name}.bias"), conv.bias.shape().to_vec()));
        }
        if meta.params.len() != expected.len() {
            return Err(corrupt(format!(
                "parameter index has {} entries, architecture needs {}",
                meta.params.len(),
                expected.len()
            )));
        }
        for (pm, (name, shape)) in meta.params.iter().zip(&expected) {
            if &pm.name != name || &pm.shape != shape {
                return Err(corrupt(format!(
                    "parameter {} with shape {:?} does not match expected {} {:?}",
                    pm.name, pm.shape, name, shape
                )));
            }
        }
        for (_, conv) in model.named_convs_mut() {
            read_f32s(&mut r, conv.weight.as_slice_mut().expect("standard layout"), path)?;
            read_f32s(&mut r, conv.bias.as_slice_mut().expect("standard layout"), path)?;
        }
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => {}
            Ok(_) => return Err(corrupt("trailing bytes after parameter blocks".into())),
            Err(source) => return Err(io_err(source)),
        }

        Ok(Checkpoint { model, config: meta.config, epoch: meta.epoch, history: meta.history })
    }
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    // Buffer per tensor: one write_all per parameter block.
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|source| {
        if source.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Corrupt {
                path: path.to_path_buf(),
                reason: "file is truncated".into(),
            }
        } else {
            CheckpointError::Io { path: path.to_path_buf(), source }
        }
    })
}

fn read_f32s<R: Read>(r: &mut R, out: &mut [f32], path: &Path) -> Result<(), CheckpointError> {
    let mut bytes = vec![0u8; out.len() * 4];
    read_exact(r, &mut bytes, path)?;
    for (v, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}
