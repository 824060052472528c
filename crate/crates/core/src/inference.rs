//! Single-pass denoising and iterative output refinement.

use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::network::{Network, NetworkError};
use crate::noise::NoiseKind;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("refinement alpha must lie in [0, 1], got {0}")]
    Alpha(f32),
    #[error("model maps {expected} channels, image has {found}")]
    Channels { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub num_iters: usize,
    pub alpha: f32,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            num_iters: 10,
            alpha: 0.01,
        }
    }
}

impl RefineConfig {
    pub fn for_kind(kind: NoiseKind) -> Self {
        let num_iters = match kind {
            NoiseKind::Poisson => 100,
            NoiseKind::Gaussian | NoiseKind::Bernoulli => 10,
        };
        Self {
            num_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if (0.0..=1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(InferenceError::Alpha(self.alpha))
        }
    }
}

/// Anything that maps an `(N, C, H, W)` batch to a same-sized batch.
pub trait Denoiser {
    /// Spatial extents passed to [`Denoiser::apply`] are multiples of this.
    fn spatial_multiple(&self) -> usize {
        1
    }

    /// Channels expected at the input, if fixed.
    fn in_channels(&self) -> Option<usize> {
        None
    }

    fn apply(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError>;
}

impl Denoiser for Network {
    fn spatial_multiple(&self) -> usize {
        self.config().spatial_multiple()
    }

    fn in_channels(&self) -> Option<usize> {
        Some(self.config().in_channels)
    }

    fn apply(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError> {
        Ok(self.forward_tensor(batch)?)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Reflect-pads the bottom and right edges up to the next multiple.
pub fn pad_reflect(image: &Image, multiple: usize) -> Image {
    let up = |n: usize| n.div_ceil(multiple) * multiple;
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (up(h), up(w));
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    Image::from_fn(ph, pw, image.channels(), |c, y, x| {
        image.get(c, reflect(y as isize, h), reflect(x as isize, w))
    })
    .expect("padded dims are nonzero")
}

/// Raw (unclamped) network output at the image's own size.
fn forward_raw<D: Denoiser + ?Sized>(net: &D, image: &Image) -> Result<Image, InferenceError> {
    if let Some(expected) = net.in_channels() {
        if expected != image.channels() {
            return Err(InferenceError::Channels {
                expected,
                found: image.channels(),
            });
        }
    }
    let padded = pad_reflect(image, net.spatial_multiple().max(1));
    let out = net.apply(&padded.to_tensor())?;
    let out = Image::from_tensor(&out, 0)?;
    if out.height() == image.height() && out.width() == image.width() {
        Ok(out)
    } else {
        Ok(out.crop(0, 0, image.height(), image.width())?)
    }
}

/// `f(y)` clamped to `[0, 1]`.
pub fn denoise<D: Denoiser + ?Sized>(net: &D, y: &Image) -> Result<Image, InferenceError> {
    let mut out = forward_raw(net, y)?;
    out.clamp_unit();
    Ok(out)
}

/// `out ← f(y)`, then `num_iters` times `out ← out + α·(f(out) − out)`,
/// clamped once at the end.
pub fn refine<D: Denoiser + ?Sized>(net: &D, y: &Image, cfg: &RefineConfig) -> Result<Image, InferenceError> {
    cfg.validate()?;
    let mut out = forward_raw(net, y)?;
    if cfg.alpha != 0.0 {
        for _ in 0..cfg.num_iters {
            let tmp = forward_raw(net, &out)?;
            for (o, t) in out.data_mut().iter_mut().zip(tmp.data()) {
                *o += cfg.alpha * (*t - *o);
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_unet, UNetConfig};
    use crate::rng::RngStream;

    struct Identity;
    impl Denoiser for Identity {
        fn apply(&self, b: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError> {
            Ok(b.clone())
        }
    }

    struct Constant(f32);
    impl Denoiser for Constant {
        fn apply(&self, b: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError> {
            Ok(Tensor::full(b.shape(), self.0))
        }
    }

    fn net() -> Network {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            ..Default::default()
        };
        let (unet, params) = build_unet(cfg, &mut RngStream::new(3, 0)).unwrap();
        Network::new(unet, params).unwrap()
    }

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |_, y, x| ((y * w + x) % 17) as f32 / 17.0).unwrap()
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (0..8).map(|i| reflect(i, 3)).collect();
        assert_eq!(idx, [0, 1, 2, 1, 0, 1, 2, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn padding_and_crop_keep_size() {
        let y = ramp(13, 10);
        let p = pad_reflect(&y, 4);
        assert_eq!((p.height(), p.width()), (16, 12));
        assert_eq!(p.get(0, 13, 3), y.get(0, 11, 3));
        let out = denoise(&net(), &y).unwrap();
        assert_eq!((out.height(), out.width()), (13, 10));
    }

    #[test]
    fn zero_iters_equals_single_pass() {
        let n = net();
        let y = ramp(16, 16);
        let cfg = RefineConfig {
            num_iters: 0,
            alpha: 0.3,
        };
        assert_eq!(refine(&n, &y, &cfg).unwrap(), denoise(&n, &y).unwrap());
        let cfg = RefineConfig {
            num_iters: 7,
            alpha: 0.0,
        };
        assert_eq!(refine(&n, &y, &cfg).unwrap(), denoise(&n, &y).unwrap());
    }

    #[test]
    fn identity_and_constant() {
        let y = ramp(9, 11);
        let cfg = RefineConfig {
            num_iters: 25,
            alpha: 0.37,
        };
        assert_eq!(refine(&Identity, &y, &cfg).unwrap(), y);
        let c = refine(&Constant(0.25), &y, &cfg).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.25));
        let z = denoise(&Constant(-3.0), &y).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_alpha_and_channels() {
        let y = ramp(8, 8);
        let bad = RefineConfig {
            num_iters: 1,
            alpha: 1.5,
        };
        assert!(matches!(refine(&Identity, &y, &bad), Err(InferenceError::Alpha(_))));
        let rgb = Image::filled(8, 8, 3, 0.5).unwrap();
        assert!(matches!(denoise(&net(), &rgb), Err(InferenceError::Channels { .. })));
    }

    #[test]
    fn kind_defaults() {
        assert_eq!(RefineConfig::for_kind(NoiseKind::Poisson).num_iters, 100);
        assert_eq!(RefineConfig::for_kind(NoiseKind::Gaussian).num_iters, 10);
        assert_eq!(RefineConfig::for_kind(NoiseKind::Bernoulli).alpha, 0.01);
    }
}
