use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::model::RendererConfig;
use crate::{Error, Result};

/// Bumped whenever the tensor naming or sidecar layout changes.
pub const FORMAT_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestScore {
    pub epoch: usize,
    /// Mean perceptual distance on the test split; lower is better.
    pub perceptual: f64,
}

/// The data-order stream: batches and augmentations of epoch `e` are drawn
/// from `(seed, e)`, so the completed-epoch count is the whole rng state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

/// JSON sidecar written next to each weight archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub code_version: String,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub gen_opt_steps: u64,
    pub dis_opt_steps: u64,
    pub rng: RngState,
    pub best: Option<BestScore>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Model parameters and buffers by module path, plus optimiser moments
    /// under `opt.gen.*` and `opt.dis.*`.
    pub tensors: HashMap<String, Tensor>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_e{epoch:04}.bin")
}

/// Writes the safetensors archive at `path` and its sidecar, each through a
/// temporary file so readers never see a partial checkpoint.
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &HashMap<String, Tensor>) -> Result<()> {
    write_archive(path, meta, tensors)
}

pub(crate) fn write_archive<M: Serialize>(path: &Path, meta: &M, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    candle_core::safetensors::save(tensors, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let tmp = side.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &side).map_err(|e| Error::io(&side, e))
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    read_sidecar(path)
}

/// Reads a sidecar, rejecting any other format version before parsing the
/// rest.
pub(crate) fn read_sidecar<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let side = sidecar_path(path);
    let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64());
    if found != Some(FORMAT_VERSION as u64) {
        let found_code = raw.get("code_version").and_then(|v| v.as_str()).unwrap_or("unknown");
        return Err(Error::CheckpointMismatch {
            key: "format_version".into(),
            found: format!("{} (written by {found_code})", found.map_or("missing".into(), |v| v.to_string())),
            expected: format!("{FORMAT_VERSION} (this is {CODE_VERSION})"),
        });
    }
    Ok(serde_json::from_value(raw)?)
}

pub(crate) fn read_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    let meta = load_meta(path)?;
    let tensors = read_tensors(path)?;
    Ok(Checkpoint { meta, tensors })
}

/// Fails on the first shape-determining key that differs.
pub fn check_schedule(found: &RendererConfig, expected: &RendererConfig) -> Result<()> {
    for ((key, f), (_, e)) in found.schedule().into_iter().zip(expected.schedule()) {
        if f != e {
            return Err(Error::CheckpointMismatch {
                key: key.to_string(),
                found: f,
                expected: e,
            });
        }
    }
    Ok(())
}
