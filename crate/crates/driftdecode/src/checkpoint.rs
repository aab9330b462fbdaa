//! Checkpoints: a named-tensor archive holding live, EMA, and optimizer
//! tensors, plus a JSON metadata sidecar (`<checkpoint>.json`).

use std::path::{Path, PathBuf};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::features::ExtractorSpec;
use crate::models::{JsccSystem, ModelConfig};
use crate::params::Params;
use crate::tensor::{Elem, Tensor};
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extractor: ExtractorSpec,
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub opt_step: u64,
    pub master_seed: u64,
    pub has_ema: bool,
}

pub struct CheckpointState<T: Elem> {
    pub meta: CheckpointMeta,
    pub live: Params<T>,
    pub ema: Vec<Tensor<T>>,
    pub opt_m: Vec<Tensor<T>>,
    pub opt_v: Vec<Tensor<T>>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Write the archive and its metadata sidecar.
pub fn save<T: Elem>(
    path: &Path,
    meta: &CheckpointMeta,
    live: &Params<T>,
    ema: &[Tensor<T>],
    opt: (&[Tensor<T>], &[Tensor<T>]),
) -> Result<()> {
    let mut ar = Archive::new();
    for (i, (name, tensor)) in live.iter().enumerate() {
        ar.insert(format!("live.{name}"), tensor.clone());
        ar.insert(format!("ema.{name}"), ema[i].clone());
        ar.insert(format!("opt.m.{name}"), opt.0[i].clone());
        ar.insert(format!("opt.v.{name}"), opt.1[i].clone());
    }
    ar.save(path)?;
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

/// Load and validate a checkpoint: the model is rebuilt from the stored
/// config and every tensor's shape is checked against it.
pub fn load<T: Elem>(path: &Path) -> Result<CheckpointState<T>> {
    let mp = meta_path(path);
    let meta_bytes = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta = parse_meta(&meta_bytes)?;
    let ar = Archive::load(path)?;

    // Fresh system defines the expected parameter set and shapes.
    let system: JsccSystem<T> = JsccSystem::new(meta.model.clone(), meta.master_seed)?;
    let mut live = system.params;
    let mut ema = Vec::with_capacity(live.len());
    let mut opt_m = Vec::with_capacity(live.len());
    let mut opt_v = Vec::with_capacity(live.len());
    let names: Vec<String> = live.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let shape = live.get(crate::params::ParamId(i)).shape().to_vec();
        live.set(crate::params::ParamId(i), ar.tensor(&format!("live.{name}"), &shape)?);
        ema.push(ar.tensor(&format!("ema.{name}"), &shape)?);
        opt_m.push(ar.tensor(&format!("opt.m.{name}"), &shape)?);
        opt_v.push(ar.tensor(&format!("opt.v.{name}"), &shape)?);
    }
    Ok(CheckpointState { meta, live, ema, opt_m, opt_v })
}

/// Parse and validate checkpoint metadata bytes.
pub fn parse_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_slice(bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata parse failed: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    meta.model.validate()?;
    meta.train.validate()?;
    Ok(meta)
}
