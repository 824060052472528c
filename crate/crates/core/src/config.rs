//! Flat `key = value` run configuration.
//!
//! Keys use dotted prefixes (`noise.model`, `train.epochs`). `#` starts a
//! comment. Numbers may be written as fractions such as `20/255`. Keys that
//! are absent take the defaults of the selected noise model, so
//! `noise.model` is applied first regardless of its position in the file.
//! [`RunConfig::to_text`] writes every key, and parsing that text gives back
//! an identical config.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::noise::NoiseKind;
use crate::trainer::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("config line {line}: key `{key}` is set twice")]
    DuplicateKey { key: String, line: usize },
    #[error("config line {line}: bad value `{value}` for `{key}`: {reason}")]
    Value {
        key: String,
        line: usize,
        value: String,
        reason: String,
    },
    #[error(transparent)]
    Invalid(#[from] TrainError),
}

/// Every recognised key, in the order written by [`RunConfig::to_text`].
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "data.manifest",
    "noise.model",
    "noise.stage1_min",
    "noise.stage1_max",
    "noise.stage2_min",
    "noise.stage2_max",
    "noise.validation",
    "net.in_channels",
    "net.out_channels",
    "net.depth",
    "net.base_channels",
    "net.kernel_size",
    "loss.mse_weight",
    "loss.perceptual_weight",
    "loss.feature_seed",
    "train.epochs",
    "train.batch_size",
    "train.patch_size",
    "optim.learning_rate",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "refine.iters",
    "refine.alpha",
    "ssim.window",
    "ssim.sigma",
    "ssim.c1",
    "ssim.c2",
    "ssim.range",
    "output.checkpoint_dir",
    "output.log",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_kind(kind: NoiseKind) -> Self {
        Self {
            manifest: None,
            train: TrainConfig::for_kind(kind),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: HashMap<&str, (&str, usize)> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                });
            }
            if entries.insert(key, (value, line)).is_some() {
                return Err(ConfigError::DuplicateKey {
                    key: key.to_string(),
                    line,
                });
            }
        }

        let kind = match entries.get("noise.model") {
            Some(&(v, line)) => v.parse::<NoiseKind>().map_err(|e| value_err("noise.model", line, v, e))?,
            None => NoiseKind::Gaussian,
        };
        let mut cfg = Self::for_kind(kind);
        let mut keys: Vec<_> = entries.into_iter().collect();
        keys.sort_by_key(|(_, (_, line))| *line);
        for (key, (value, line)) in keys {
            cfg.set(key, value, line)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let f = || parse_f64(key, v, line);
        let u = || parse_usize(key, v, line);
        match key {
            "seed" => t.seed = parse_u64(key, v, line)?,
            "data.manifest" => self.manifest = path_value(v),
            "noise.model" => {}
            "noise.stage1_min" => t.noise.stage1.lo = f()?,
            "noise.stage1_max" => t.noise.stage1.hi = f()?,
            "noise.stage2_min" => t.noise.stage2.lo = f()?,
            "noise.stage2_max" => t.noise.stage2.hi = f()?,
            "noise.validation" => t.validation_param = f()?,
            "net.in_channels" => t.unet.in_channels = u()?,
            "net.out_channels" => t.unet.out_channels = u()?,
            "net.depth" => t.unet.depth = u()?,
            "net.base_channels" => t.unet.base_channels = u()?,
            "net.kernel_size" => t.unet.kernel_size = u()?,
            "loss.mse_weight" => t.loss.mse = f()?,
            "loss.perceptual_weight" => t.loss.perceptual = f()?,
            "loss.feature_seed" => t.feature_seed = parse_u64(key, v, line)?,
            "train.epochs" => t.epochs = u()?,
            "train.batch_size" => t.batch_size = u()?,
            "train.patch_size" => t.patch_size = u()?,
            "optim.learning_rate" => t.adam.learning_rate = f()?,
            "optim.weight_decay" => t.adam.weight_decay = f()?,
            "optim.beta1" => t.adam.beta1 = f()?,
            "optim.beta2" => t.adam.beta2 = f()?,
            "optim.eps" => t.adam.eps = f()?,
            "refine.iters" => t.refine.num_iters = u()?,
            "refine.alpha" => t.refine.alpha = parse_f32(key, v, line)?,
            "ssim.window" => t.ssim.window_size = u()?,
            "ssim.sigma" => t.ssim.sigma = f()?,
            "ssim.c1" => t.ssim.c1 = f()?,
            "ssim.c2" => t.ssim.c2 = f()?,
            "ssim.range" => t.ssim.dynamic_range = f()?,
            "output.checkpoint_dir" => t.checkpoint_dir = path_value(v),
            "output.log" => t.log_path = path_value(v),
            _ => unreachable!("key list checked during parsing"),
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let values: Vec<String> = vec![
            t.seed.to_string(),
            path(&self.manifest),
            t.noise.kind.to_string(),
            t.noise.stage1.lo.to_string(),
            t.noise.stage1.hi.to_string(),
            t.noise.stage2.lo.to_string(),
            t.noise.stage2.hi.to_string(),
            t.validation_param.to_string(),
            t.unet.in_channels.to_string(),
            t.unet.out_channels.to_string(),
            t.unet.depth.to_string(),
            t.unet.base_channels.to_string(),
            t.unet.kernel_size.to_string(),
            t.loss.mse.to_string(),
            t.loss.perceptual.to_string(),
            t.feature_seed.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.patch_size.to_string(),
            t.adam.learning_rate.to_string(),
            t.adam.weight_decay.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.eps.to_string(),
            t.refine.num_iters.to_string(),
            t.refine.alpha.to_string(),
            t.ssim.window_size.to_string(),
            t.ssim.sigma.to_string(),
            t.ssim.c1.to_string(),
            t.ssim.c2.to_string(),
            t.ssim.dynamic_range.to_string(),
            path(&t.checkpoint_dir),
            path(&t.log_path),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }
}

fn value_err(key: &str, line: usize, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        line,
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn path_value(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// A decimal number or a fraction `a/b`.
fn parse_f64(key: &str, v: &str, line: usize) -> Result<f64, ConfigError> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| value_err(key, line, v, e));
    let x = match v.split_once('/') {
        Some((a, b)) => {
            let d = num(b)?;
            if d == 0.0 {
                return Err(value_err(key, line, v, "division by zero"));
            }
            num(a)? / d
        }
        None => num(v)?,
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err(value_err(key, line, v, "not a finite number"))
    }
}

fn parse_f32(key: &str, v: &str, line: usize) -> Result<f32, ConfigError> {
    if v.contains('/') {
        Ok(parse_f64(key, v, line)? as f32)
    } else {
        v.parse::<f32>().map_err(|e| value_err(key, line, v, e))
    }
}

fn parse_usize(key: &str, v: &str, line: usize) -> Result<usize, ConfigError> {
    v.parse().map_err(|e| value_err(key, line, v, e))
}

fn parse_u64(key: &str, v: &str, line: usize) -> Result<u64, ConfigError> {
    v.parse().map_err(|e| value_err(key, line, v, e))
}
