use rayon::prelude::*;

use super::{check_channels, DataRole, DatasetManifest, TrainConfig, TrainError, TrainingSet};
use crate::image::Image;
use crate::inference::{denoise, Denoiser, InferenceError};
use crate::metrics::{evaluate_pairs, MetricsReport, SsimParams};
use crate::noise::{degrade, NoiseError, NoiseKind};
use crate::rng::{RngStream, StreamTag};

/// Clean validation images with one fixed corruption each.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSet {
    pub ids: Vec<String>,
    pub clean: Vec<Image>,
    pub noisy: Vec<Image>,
}

impl ValidationSet {
    /// Image `i` uses its own stream, so the set is the same every epoch.
    pub fn corrupt(
        ids: Vec<String>,
        clean: Vec<Image>,
        kind: NoiseKind,
        param: f64,
        seed: u64,
    ) -> Result<Self, NoiseError> {
        let noisy = clean
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = RngStream::derive(seed, StreamTag::Validation, &[i as u64]);
                degrade(x, kind, param, &mut rng).map(|(y, _)| y)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { ids, clean, noisy })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn noisy_report(&self, ssim: &SsimParams) -> Result<MetricsReport, TrainError> {
        Ok(evaluate_pairs(&self.ids, &self.noisy, &self.clean, ssim)?)
    }

    /// Metrics of `f(noisy)` against the clean images.
    pub fn report_with<F>(&self, ssim: &SsimParams, f: F) -> Result<MetricsReport, TrainError>
    where
        F: Fn(&Image) -> Result<Image, InferenceError> + Sync,
    {
        let out = self.noisy.par_iter().map(&f).collect::<Result<Vec<_>, _>>()?;
        Ok(evaluate_pairs(&self.ids, &out, &self.clean, ssim)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub noisy: MetricsReport,
    pub denoised: MetricsReport,
}

/// Single-pass denoising of every noisy image, scored against the clean one.
pub fn validate<D: Denoiser + Sync>(net: &D, set: &ValidationSet, ssim: &SsimParams) -> Result<MetricsReport, TrainError> {
    set.report_with(ssim, |y| denoise(net, y))
}

/// Validation over a manifest's `[val]` split.
pub fn validate_manifest<D: Denoiser + Sync>(
    net: &D,
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<ValidationReport, TrainError> {
    if manifest.role != DataRole::Clean {
        return Err(TrainError::NoCleanReferences);
    }
    let data = TrainingSet::from_manifest(manifest)?;
    check_channels(&data.val, config.unet.in_channels)?;
    let set = ValidationSet::corrupt(
        data.val_ids,
        data.val,
        config.noise.kind,
        config.validation_param,
        config.seed,
    )?;
    Ok(ValidationReport {
        noisy: set.noisy_report(&config.ssim)?,
        denoised: validate(net, &set, &config.ssim)?,
    })
}
