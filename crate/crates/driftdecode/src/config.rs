//! Flat key=value run configuration with cosmetic `[section]` headers.
//!
//! Keys mirror the config struct field names exactly. Unknown keys are
//! rejected by name. `--set key=value` overrides are applied after the file
//! parses. Lists are comma-separated; pairs like `snr_range_db` take
//! `lo,hi`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::channel::ChannelKind;
use crate::error::{Error, Result};
use crate::features::{ExtractorKind, ExtractorSpec};
use crate::models::ModelConfig;
use crate::training::TrainConfig;

/// Which dataset backend a run reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DataKind {
    Mnist,
    Folder,
    Synth,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DataConfig {
    pub dataset: DataKind,
    pub data_dir: PathBuf,
    pub channels: usize,
    pub crop: Option<(usize, usize)>,
    pub hflip: bool,
    pub train_limit: Option<usize>,
    pub synth_train: usize,
    pub synth_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DataKind::Synth,
            data_dir: PathBuf::from("data"),
            channels: 1,
            crop: None,
            hflip: false,
            train_limit: None,
            synth_train: 12000,
            synth_test: 2000,
        }
    }
}

/// Resolved configuration of one run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extractor: ExtractorSpec,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::mnist(),
            train: TrainConfig::default(),
            extractor: ExtractorSpec::fixed_random(7),
            data: DataConfig::default(),
        }
    }
}

/// Parse file contents into an ordered key -> value map.
pub fn parse_str(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            continue; // section headers are documentation only
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::ConfigValue {
                key: format!("line {}", lineno + 1),
                detail: format!("expected key=value, got {line:?}"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::ConfigValue { key, detail: "duplicate key".into() });
        }
    }
    Ok(map)
}

pub fn load_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text)
}

fn value_err(key: &str, detail: impl Into<String>) -> Error {
    Error::ConfigValue { key: key.to_string(), detail: detail.into() }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| value_err(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(value_err(key, format!("expected a boolean, got {v:?}"))),
    }
}

fn parse_list_f64(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| parse_num::<f64>(key, s.trim()))
        .collect()
}

fn parse_pair_f64(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts = parse_list_f64(key, v)?;
    if parts.len() != 2 {
        return Err(value_err(key, "expected exactly two comma-separated values"));
    }
    Ok((parts[0], parts[1]))
}

fn parse_pair_usize(key: &str, v: &str) -> Result<(usize, usize)> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|s| parse_num::<usize>(key, s.trim()))
        .collect::<Result<_>>()?;
    if parts.len() != 2 {
        return Err(value_err(key, "expected exactly two comma-separated values"));
    }
    Ok((parts[0], parts[1]))
}

impl RunConfig {
    /// Apply a parsed key map on top of the defaults, rejecting unknown keys.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (key, v) in map {
            cfg.apply(key, v)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Set one key; unknown names are an error naming the key.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            // training
            "lambda_mse" => self.train.lambda_mse = parse_num(key, v)?,
            "lambda_drift" => self.train.lambda_drift = parse_num(key, v)?,
            "temps" => self.train.temps = parse_list_f64(key, v)?,
            "snr_range_db" => self.train.snr_range_db = parse_pair_f64(key, v)?,
            "batch" => self.train.batch = parse_num(key, v)?,
            "epochs" => self.train.epochs = parse_num(key, v)?,
            "lr" => self.train.lr = parse_num(key, v)?,
            "warmup_steps" => self.train.warmup_steps = parse_num(key, v)?,
            "betas" => self.train.betas = parse_pair_f64(key, v)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "clip_norm" => self.train.clip_norm = parse_num(key, v)?,
            "ema_decay" => self.train.ema_decay = parse_num(key, v)?,
            "channel" => {
                self.train.channel = ChannelKind::parse(v)
                    .ok_or_else(|| value_err(key, format!("unknown channel {v:?} (awgn|rayleigh)")))?
            }
            "seed" => self.train.seed = parse_num(key, v)?,
            "val_images" => self.train.val_images = parse_num(key, v)?,
            "val_snrs_db" => self.train.val_snrs_db = parse_list_f64(key, v)?,
            "checkpoint_every_epochs" => self.train.checkpoint_every_epochs = parse_num(key, v)?,
            // model
            "image_channels" => self.model.image_channels = parse_num(key, v)?,
            "image_h" => self.model.image_h = parse_num(key, v)?,
            "image_w" => self.model.image_w = parse_num(key, v)?,
            "cbr" => self.model.cbr = parse_num(key, v)?,
            "base_width" => self.model.base_width = parse_num(key, v)?,
            "depth" => self.model.depth = parse_num(key, v)?,
            "blocks_per_level" => self.model.blocks_per_level = parse_num(key, v)?,
            "embed_dim" => self.model.embed_dim = parse_num(key, v)?,
            "film_hidden" => self.model.film_hidden = parse_num(key, v)?,
            "enc_width" => self.model.enc_width = parse_num(key, v)?,
            "enc_downsamples" => self.model.enc_downsamples = parse_num(key, v)?,
            "stem_width" => self.model.stem_width = parse_num(key, v)?,
            // extractor
            "extractor" => {
                self.extractor.kind = match v.to_ascii_lowercase().as_str() {
                    "fixed_random" => ExtractorKind::FixedRandom,
                    "pretrained" => ExtractorKind::PretrainedArchive,
                    _ => return Err(value_err(key, format!("unknown extractor {v:?} (fixed_random|pretrained)"))),
                }
            }
            "extractor_seed" => self.extractor.seed = parse_num(key, v)?,
            "extractor_layers" => {
                self.extractor.layers = v.split(',').map(|s| s.trim().to_string()).collect()
            }
            "archive_path" => self.extractor.archive_path = Some(PathBuf::from(v)),
            // data
            "dataset" => {
                self.data.dataset = match v.to_ascii_lowercase().as_str() {
                    "mnist" => DataKind::Mnist,
                    "folder" => DataKind::Folder,
                    "synth" => DataKind::Synth,
                    _ => return Err(value_err(key, format!("unknown dataset {v:?} (mnist|folder|synth)"))),
                }
            }
            "data_dir" => self.data.data_dir = PathBuf::from(v),
            "channels" => self.data.channels = parse_num(key, v)?,
            "crop" => self.data.crop = Some(parse_pair_usize(key, v)?),
            "hflip" => self.data.hflip = parse_bool(key, v)?,
            "train_limit" => self.data.train_limit = Some(parse_num(key, v)?),
            "synth_train" => self.data.synth_train = parse_num(key, v)?,
            "synth_test" => self.data.synth_test = parse_num(key, v)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }
}
