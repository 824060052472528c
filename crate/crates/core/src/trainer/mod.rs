//! Observed-set synthesis, the training loop and validation.

mod manifest;
mod run;
mod synthetic;
mod validate;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::inference::{InferenceError, RefineConfig};
use crate::io::ImageIoError;
use crate::losses::{LossError, LossWeights, DEFAULT_FEATURE_SEED};
use crate::metrics::{MetricsError, SsimParams};
use crate::network::{AdamConfig, CheckpointError, NetworkError, UNetConfig};
use crate::noise::{NoiseError, NoiseKind, NoiseSpec};

pub use manifest::{DataRole, DatasetManifest, ManifestEntry, ManifestError, Split};
pub use run::{synthesize_observed, train, training_stream_ids, ObservedImage, TrainOutcome, TrainingSet};
pub use synthetic::{synthetic_corpus, synthetic_image, SYNTHETIC_FLOOR};
pub use validate::{validate, validate_manifest, ValidationReport, ValidationSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no training image is at least {patch}x{patch} pixels")]
    NoUsableImages { patch: usize },
    #[error("image has {found} channels, network expects {expected}")]
    Channels { expected: usize, found: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}; training aborted")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("validation needs clean reference images; this manifest holds observed (noisy) data, use denoise for inference only")]
    NoCleanReferences,
}

/// Everything that controls a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub noise: NoiseSpec,
    /// Fixed corruption level applied to validation images.
    pub validation_param: f64,
    pub loss: LossWeights,
    pub feature_seed: u64,
    pub unet: UNetConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Stored in checkpoints as the inference default.
    pub refine: RefineConfig,
    pub ssim: SsimParams,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn for_kind(kind: NoiseKind) -> Self {
        Self {
            seed: 0,
            noise: NoiseSpec::for_kind(kind),
            validation_param: NoiseSpec::default_validation_param(kind),
            loss: LossWeights::for_kind(kind),
            feature_seed: DEFAULT_FEATURE_SEED,
            unet: UNetConfig::default(),
            adam: AdamConfig::default(),
            epochs: 15,
            batch_size: 4,
            patch_size: 64,
            refine: RefineConfig::for_kind(kind),
            ssim: SsimParams::default(),
            checkpoint_dir: None,
            log_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.noise.validate()?;
        self.noise.kind.check_param(self.validation_param)?;
        self.loss.validate()?;
        self.unet.validate()?;
        self.refine.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        let m = self.unet.spatial_multiple();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(m) {
            return bad(format!(
                "patch size {} must be a positive multiple of {m} for a depth-{} network",
                self.patch_size, self.unet.depth
            ));
        }
        if self.noise.kind == NoiseKind::Bernoulli && self.loss.perceptual != 0.0 {
            return Err(LossError::MaskedPerceptual(self.loss.perceptual).into());
        }
        if self.loss.perceptual != 0.0 && self.patch_size < 8 {
            return bad(format!("perceptual loss needs patches of at least 8, got {}", self.patch_size));
        }
        if self.unet.in_channels != self.unet.out_channels {
            return bad("input and output channel counts must match".into());
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.weight_decay >= 0.0 && a.eps > 0.0) {
            return bad("learning rate and eps must be positive, weight decay non-negative".into());
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogEvent {
    Step,
    Epoch,
    Abort,
}

/// One JSON-lines record. `Step` carries the batch loss, `Epoch` the mean
/// batch loss of the epoch plus validation metrics when available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub event: LogEvent,
    pub epoch: usize,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_psnr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_psnr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl TrainLogRecord {
    fn new(event: LogEvent, epoch: usize, step: usize) -> Self {
        Self {
            event,
            epoch,
            step,
            loss: None,
            val_psnr_db: None,
            val_ssim: None,
            noisy_psnr_db: None,
            noisy_ssim: None,
            message: None,
        }
    }
}

fn check_channels(images: &[Image], expected: usize) -> Result<(), TrainError> {
    match images.iter().find(|im| im.channels() != expected) {
        Some(im) => Err(TrainError::Channels {
            expected,
            found: im.channels(),
        }),
        None => Ok(()),
    }
}
