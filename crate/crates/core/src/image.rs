//! Planar floating-point images and per-pixel masks.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("pixel buffer has {found} values, expected {expected}")]
    DataLength { expected: usize, found: usize },
    #[error("tensor shape {0:?} cannot hold an image")]
    TensorShape(Vec<usize>),
    #[error("crop {height}x{width} at ({top},{left}) exceeds image bounds")]
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
}

/// Intensities in `[0, 1]`, stored channel-planar (all of channel 0, then
/// channel 1, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(ImageError::DataLength {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from `f(channel, row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image, ImageError> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(ImageError::Crop {
                top,
                left,
                height,
                width,
            });
        }
        Image::from_fn(height, width, self.channels, |c, y, x| self.get(c, top + y, left + x))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
        .expect("same dimensions")
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("consistent dimensions")
    }

    /// Stacks equally sized images into an `(N, C, H, W)` batch.
    pub fn batch_tensor<T: Scalar>(images: &[Image]) -> Tensor<T> {
        let first = &images[0];
        assert!(images.iter().all(|im| im.same_dims(first)), "batch images must share dimensions");
        let data = images
            .iter()
            .flat_map(|im| im.data.iter().map(|&v| T::from_f64(v as f64)))
            .collect();
        Tensor::new(vec![images.len(), first.channels, first.height, first.width], data)
            .expect("consistent dimensions")
    }

    /// Sample `index` of an `(N, C, H, W)` tensor, without clamping.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Image, ImageError> {
        let [n, c, h, w] = t.dims4("image").map_err(|_| ImageError::TensorShape(t.shape().to_vec()))?;
        if index >= n {
            return Err(ImageError::TensorShape(t.shape().to_vec()));
        }
        let len = c * h * w;
        let data = t.data()[index * len..(index + 1) * len]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Image::new(h, w, c, data)
    }
}

/// Binary per-pixel indicator shared by all channels of a pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != height * width {
            return Err(ImageError::DataLength {
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Pixels holding any nonzero channel. Degradation writes exact zeros, so
    /// this recovers which pixels survived.
    pub fn observed(image: &Image) -> Self {
        let plane = image.pixels();
        let data = (0..plane)
            .map(|p| u8::from((0..image.channels).any(|c| image.data[c * plane + p] != 0.0)))
            .collect();
        Self {
            height: image.height,
            width: image.width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Grayscale rendering with 1 for kept pixels.
    pub fn to_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("mask dimensions are positive")
    }

    /// Broadcasts a batch of masks over `channels` into an `(N, C, H, W)`
    /// tensor of zeros and ones.
    pub fn batch_tensor<T: Scalar>(masks: &[PixelMask], channels: usize) -> Tensor<T> {
        let (h, w) = (masks[0].height, masks[0].width);
        let mut data = Vec::with_capacity(masks.len() * channels * h * w);
        for m in masks {
            assert!(m.height == h && m.width == w, "batch masks must share dimensions");
            for _ in 0..channels {
                data.extend(m.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }));
            }
        }
        Tensor::new(vec![masks.len(), channels, h, w], data).expect("consistent dimensions")
    }
}
