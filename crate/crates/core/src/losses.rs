//! Training losses: pixel MSE, MSE restricted to observed pixels, and a
//! content loss in the space of a frozen convolutional feature map.
//!
//! All losses are per-element means so their scale does not depend on batch
//! or image size.

use thiserror::Error;

use crate::noise::NoiseKind;
use crate::rng::{RngStream, StreamTag};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("perceptual loss needs at least {min}x{min} inputs, got {height}x{width}")]
    Undersized { min: usize, height: usize, width: usize },
    #[error("perceptual weight {0} cannot be combined with a pixel mask; set it to 0 for masked training")]
    MaskedPerceptual(f64),
    #[error("loss weights must be finite and non-negative")]
    NegativeWeight,
}

/// Differentiable image-to-features map used by the content loss.
pub trait FeatureMap {
    /// Smallest spatial extent accepted.
    fn min_size(&self) -> usize;

    fn features<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, LossError>;
}

/// Fixed two-stage filter bank: 16 3×3 filters + ReLU, then 16 3×3 filters
/// at stride 2 + ReLU. Weights are He-normal from a fixed seed and never
/// trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    in_channels: usize,
    w1: Tensor<f32>,
    b1: Tensor<f32>,
    w2: Tensor<f32>,
    b2: Tensor<f32>,
}

pub const DEFAULT_FEATURE_SEED: u64 = 0x0f3a_7c21;
const FEATURES: usize = 16;

impl FeatureExtractor {
    pub fn seeded(in_channels: usize, seed: u64) -> Self {
        let mut rng = RngStream::derive(seed, StreamTag::Features, &[in_channels as u64]);
        let mut he = |shape: &[usize]| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let std = (2.0 / fan_in).sqrt();
            Tensor::from_fn(shape, |_| (std * rng.standard_normal()) as f32)
        };
        let w1 = he(&[FEATURES, in_channels, 3, 3]);
        let w2 = he(&[FEATURES, FEATURES, 3, 3]);
        Self {
            in_channels,
            w1,
            b1: Tensor::zeros(&[FEATURES]),
            w2,
            b2: Tensor::zeros(&[FEATURES]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
}

impl FeatureMap for FeatureExtractor {
    fn min_size(&self) -> usize {
        8
    }

    fn features<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, LossError> {
        let w1 = g.constant(self.w1.cast());
        let b1 = g.constant(self.b1.cast());
        let w2 = g.constant(self.w2.cast());
        let b2 = g.constant(self.b2.cast());
        let h = g.conv2d(x, w1, b1, 1, 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, w2, b2, 2, 1)?;
        Ok(g.relu(h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            perceptual: 0.0,
        }
    }
}

impl LossWeights {
    /// 0.5 for Gaussian, 0.2 for Poisson, none for Bernoulli.
    pub fn for_kind(kind: NoiseKind) -> Self {
        let perceptual = match kind {
            NoiseKind::Gaussian => 0.5,
            NoiseKind::Poisson => 0.2,
            NoiseKind::Bernoulli => 0.0,
        };
        Self { mse: 1.0, perceptual }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if ok(self.mse) && ok(self.perceptual) {
            Ok(())
        } else {
            Err(LossError::NegativeWeight)
        }
    }
}

/// Mean squared difference over all elements.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var, LossError> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Squared error summed over elements where `mask` is 1, divided by the
/// number of such elements. An empty mask gives a zero loss with zero
/// gradient.
pub fn masked_mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, mask: Var) -> Result<Var, LossError> {
    let kept = g.value(mask).data().iter().filter(|&&m| m != T::zero()).count();
    let d = g.sub(pred, target)?;
    let md = g.mul(d, mask)?;
    let sq = g.square(md);
    let s = g.sum(sq);
    let scale = if kept == 0 {
        T::zero()
    } else {
        T::one() / T::from_f64(kept as f64)
    };
    Ok(g.mul_scalar(s, scale))
}

/// Mean squared feature difference. The target branch is detached.
pub fn perceptual_loss<T: Scalar, F: FeatureMap>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    fx: &F,
) -> Result<Var, LossError> {
    let [_, _, h, w] = g.value(pred).dims4("perceptual_loss")?;
    if h < fx.min_size() || w < fx.min_size() {
        return Err(LossError::Undersized {
            min: fx.min_size(),
            height: h,
            width: w,
        });
    }
    let target = g.detach(target);
    let fp = fx.features(g, pred)?;
    let ft = fx.features(g, target)?;
    mse_loss(g, fp, ft)
}

/// `mse_weight · (masked) MSE + perceptual_weight · perceptual`.
pub fn combined_loss<T: Scalar, F: FeatureMap>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    mask: Option<Var>,
    weights: &LossWeights,
    fx: &F,
) -> Result<Var, LossError> {
    weights.validate()?;
    if mask.is_some() && weights.perceptual != 0.0 {
        return Err(LossError::MaskedPerceptual(weights.perceptual));
    }
    let pixel = match mask {
        Some(m) => masked_mse_loss(g, pred, target, m)?,
        None => mse_loss(g, pred, target)?,
    };
    let mut total = g.mul_scalar(pixel, T::from_f64(weights.mse));
    if weights.perceptual != 0.0 {
        let p = perceptual_loss(g, pred, target, fx)?;
        let p = g.mul_scalar(p, T::from_f64(weights.perceptual));
        total = g.add(total, p)?;
    }
    Ok(total)
}
