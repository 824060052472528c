//! Degradation models and `(z, y)` training-pair synthesis.
//!
//! Observed images `y` come from a clean `x` through one degradation; the
//! network input `z` applies the same family once more to `y`, so `z` is
//! always at least as corrupted as `y`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::image::{Image, PixelMask};
use crate::rng::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("gaussian sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("bernoulli retention probability must lie in [0, 1], got {0}")]
    Retention(f64),
    #[error("poisson peak must be positive, got {0}")]
    NonPositivePeak(f64),
    #[error("invalid parameter range [{lo}, {hi}]: {reason}")]
    Range { lo: f64, hi: f64, reason: &'static str },
    #[error("unknown noise model `{0}` (expected gaussian, bernoulli or poisson)")]
    UnknownKind(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Bernoulli => "bernoulli",
            NoiseKind::Poisson => "poisson",
        }
    }

    /// Checks a single degradation parameter.
    pub fn check_param(self, p: f64) -> Result<(), NoiseError> {
        match self {
            NoiseKind::Gaussian if !(p >= 0.0 && p.is_finite()) => Err(NoiseError::NegativeSigma(p)),
            NoiseKind::Bernoulli if !(0.0..=1.0).contains(&p) => Err(NoiseError::Retention(p)),
            NoiseKind::Poisson if !(p > 0.0 && p.is_finite()) => Err(NoiseError::NonPositivePeak(p)),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "bernoulli" => Ok(NoiseKind::Bernoulli),
            "poisson" => Ok(NoiseKind::Poisson),
            other => Err(NoiseError::UnknownKind(other.to_string())),
        }
    }
}

/// Closed interval a per-image parameter is drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn validate(&self, kind: NoiseKind) -> Result<(), NoiseError> {
        let err = |reason| NoiseError::Range {
            lo: self.lo,
            hi: self.hi,
            reason,
        };
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err(err("bounds must be finite"));
        }
        if !(0.0 <= self.lo && self.lo <= self.hi) {
            return Err(err("expected 0 <= lo <= hi"));
        }
        match kind {
            NoiseKind::Bernoulli if self.hi > 1.0 => Err(err("retention probabilities must lie in [0, 1]")),
            NoiseKind::Poisson if self.lo <= 0.0 => Err(err("poisson peaks must be positive")),
            _ => Ok(()),
        }
    }
}

/// A degradation family with the ranges for the observed image (`stage1`)
/// and for the extra corruption that produces the network input (`stage2`).
///
/// Gaussian ranges are standard deviations in intensity units, Bernoulli
/// ranges are retention probabilities and Poisson ranges are peak photon
/// counts at intensity 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub stage1: ParamRange,
    pub stage2: ParamRange,
}

impl NoiseSpec {
    pub fn gaussian() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            stage1: ParamRange::new(3.0 / 255.0, 50.0 / 255.0),
            stage2: ParamRange::new(0.0, 25.0 / 255.0),
        }
    }

    pub fn bernoulli() -> Self {
        Self {
            kind: NoiseKind::Bernoulli,
            stage1: ParamRange::new(0.35, 0.85),
            stage2: ParamRange::new(0.0, 0.8),
        }
    }

    pub fn poisson() -> Self {
        Self {
            kind: NoiseKind::Poisson,
            stage1: ParamRange::new(20.0, 40.0),
            stage2: ParamRange::new(20.0, 40.0),
        }
    }

    pub fn for_kind(kind: NoiseKind) -> Self {
        match kind {
            NoiseKind::Gaussian => Self::gaussian(),
            NoiseKind::Bernoulli => Self::bernoulli(),
            NoiseKind::Poisson => Self::poisson(),
        }
    }

    /// Parameter used to corrupt validation images.
    pub fn default_validation_param(kind: NoiseKind) -> f64 {
        match kind {
            NoiseKind::Gaussian => 20.0 / 255.0,
            NoiseKind::Bernoulli => 0.5,
            NoiseKind::Poisson => 30.0,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        self.stage1.validate(self.kind)?;
        self.stage2.validate(self.kind)
    }
}

/// Adds i.i.d. `N(0, sigma²)` noise per pixel and channel, then clamps.
pub fn degrade_gaussian(x: &Image, sigma: f64, rng: &mut RngStream) -> Result<Image, NoiseError> {
    NoiseKind::Gaussian.check_param(sigma)?;
    let mut out = x.clone();
    for v in out.data_mut() {
        let n = rng.standard_normal();
        *v = (*v as f64 + sigma * n).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Keeps each pixel with probability `q` (all channels together) and zeroes
/// the rest. Returns the kept-pixel mask.
pub fn degrade_bernoulli(x: &Image, q: f64, rng: &mut RngStream) -> Result<(Image, PixelMask), NoiseError> {
    NoiseKind::Bernoulli.check_param(q)?;
    let plane = x.pixels();
    let keep: Vec<u8> = (0..plane).map(|_| u8::from(rng.bernoulli(q))).collect();
    let mut out = x.clone();
    for c in 0..x.channels() {
        let slab = &mut out.data_mut()[c * plane..(c + 1) * plane];
        for (v, &k) in slab.iter_mut().zip(&keep) {
            if k == 0 {
                *v = 0.0;
            }
        }
    }
    let mask = PixelMask::new(x.height(), x.width(), keep).expect("mask matches image");
    Ok((out, mask))
}

/// Replaces each value `v` by `Poisson(peak·v) / peak`, clamped to `[0, 1]`.
pub fn degrade_poisson(x: &Image, peak: f64, rng: &mut RngStream) -> Result<Image, NoiseError> {
    NoiseKind::Poisson.check_param(peak)?;
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v <= 0.0 {
            *v = 0.0;
            continue;
        }
        let counts = rng.poisson(peak * *v as f64);
        *v = (counts / peak).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Uniform draw on the closed range.
pub fn sample_parameter(range: ParamRange, rng: &mut RngStream) -> f64 {
    rng.uniform_range(range.lo, range.hi)
}

/// Applies one degradation of `kind` with parameter `param`. Only Bernoulli
/// returns a mask.
pub fn degrade(
    x: &Image,
    kind: NoiseKind,
    param: f64,
    rng: &mut RngStream,
) -> Result<(Image, Option<PixelMask>), NoiseError> {
    match kind {
        NoiseKind::Gaussian => Ok((degrade_gaussian(x, param, rng)?, None)),
        NoiseKind::Bernoulli => degrade_bernoulli(x, param, rng).map(|(im, m)| (im, Some(m))),
        NoiseKind::Poisson => Ok((degrade_poisson(x, param, rng)?, None)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// Network input, degraded once more than `y`.
    pub z: Image,
    /// Pixels of `y` that carry information (Bernoulli only). The masked loss
    /// counts exactly these pixels.
    pub mask: Option<PixelMask>,
    /// Second-stage parameter that produced `z`.
    pub param: f64,
}

/// Draws a stage-two parameter and degrades `y` into `z`.
pub fn make_training_pair(y: &Image, spec: &NoiseSpec, rng: &mut RngStream) -> Result<TrainingPair, NoiseError> {
    spec.validate()?;
    let param = sample_parameter(spec.stage2, rng);
    let (z, _) = degrade(y, spec.kind, param, rng)?;
    let mask = (spec.kind == NoiseKind::Bernoulli).then(|| PixelMask::observed(y));
    Ok(TrainingPair { z, mask, param })
}
