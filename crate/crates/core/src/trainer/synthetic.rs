//! Procedural test corpus: smooth shaded backgrounds with a faint texture and
//! a handful of flat or striped shapes.

use crate::image::Image;
use crate::rng::{RngStream, StreamTag};

/// Lowest intensity produced. Keeping it above zero means a zero in a
/// Bernoulli-corrupted image always marks a dropped pixel.
pub const SYNTHETIC_FLOOR: f32 = 0.05;
const CEILING: f32 = 0.95;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Triangle { p } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

struct Layer {
    shape: Shape,
    colour: Vec<f64>,
    /// `(amplitude, frequency, angle)` of an optional stripe pattern.
    stripes: Option<(f64, f64, f64)>,
}

/// One `size × size` image; a pure function of `(seed, index)`.
pub fn synthetic_image(size: usize, channels: usize, seed: u64, index: u64) -> Image {
    let mut rng = RngStream::derive(seed, StreamTag::Synthetic, &[index, size as u64, channels as u64]);
    let s = size as f64;

    let base: Vec<f64> = (0..channels).map(|_| rng.uniform_range(0.15, 0.45)).collect();
    let tilt = rng.uniform_range(-0.15, 0.15);
    let tilt_angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let tex_amp = rng.uniform_range(0.02, 0.06);
    let tex_freq = rng.uniform_range(0.15, 0.5);
    let tex_angle = rng.uniform_range(0.0, std::f64::consts::PI);

    let n_shapes = 3 + rng.below(4);
    let layers: Vec<Layer> = (0..n_shapes)
        .map(|_| {
            let shape = match rng.below(3) {
                0 => {
                    let (h, w) = (rng.uniform_range(0.15, 0.5) * s, rng.uniform_range(0.15, 0.5) * s);
                    let (y0, x0) = (rng.uniform_range(0.0, s - h), rng.uniform_range(0.0, s - w));
                    Shape::Rect {
                        y0,
                        x0,
                        y1: y0 + h,
                        x1: x0 + w,
                    }
                }
                1 => Shape::Disc {
                    cy: rng.uniform_range(0.1, 0.9) * s,
                    cx: rng.uniform_range(0.1, 0.9) * s,
                    r: rng.uniform_range(0.08, 0.25) * s,
                },
                _ => {
                    let mut pt = || (rng.uniform_range(0.05, 0.95) * s, rng.uniform_range(0.05, 0.95) * s);
                    Shape::Triangle { p: [pt(), pt(), pt()] }
                }
            };
            let colour = (0..channels).map(|_| rng.uniform_range(0.1, 0.95)).collect();
            let stripes = rng.bernoulli(0.3).then(|| {
                (
                    rng.uniform_range(0.05, 0.15),
                    rng.uniform_range(0.3, 0.9),
                    rng.uniform_range(0.0, std::f64::consts::PI),
                )
            });
            Layer { shape, colour, stripes }
        })
        .collect();

    Image::from_fn(size, size, channels, |c, y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let ramp = tilt * ((fy / s - 0.5) * tilt_angle.sin() + (fx / s - 0.5) * tilt_angle.cos());
        let texture = tex_amp * (tex_freq * (fy * tex_angle.sin() + fx * tex_angle.cos())).sin();
        let mut v = base[c] + ramp + texture;
        for layer in &layers {
            if layer.shape.contains(fy, fx) {
                v = layer.colour[c];
                if let Some((amp, freq, angle)) = layer.stripes {
                    v += amp * (freq * (fy * angle.sin() + fx * angle.cos())).sin();
                }
            }
        }
        (v as f32).clamp(SYNTHETIC_FLOOR, CEILING)
    })
    .expect("size is positive")
}

/// Images `first..first + count`.
pub fn synthetic_corpus(count: usize, size: usize, channels: usize, seed: u64, first: u64) -> Vec<Image> {
    (0..count as u64)
        .map(|i| synthetic_image(size, channels, seed, first + i))
        .collect()
}
