//! Finite-difference cases shared by the gradient suite and the acceptance
//! summary. Every case builds a scalar from one input tensor in double
//! precision; non-scalar ops are reduced with a fixed random weighting so
//! that every output element contributes a distinct gradient.

use n2c::gradcheck::finite_diff_check;
use n2c::image::PixelMask;
use n2c::losses::{combined_loss, masked_mse_loss, mse_loss, perceptual_loss, FeatureExtractor, LossWeights};
use n2c::network::{UNet, UNetConfig};
use n2c::rng::RngStream;
use n2c::tensor::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
pub const SEEDS: u64 = 10;

/// Points closer than this to a ReLU or pooling kink are redrawn; central
/// differences straddling a kink do not estimate a derivative.
const KINK_MARGIN: f64 = 1e-3;

type Builder = Box<dyn Fn(&mut Graph<f64>, Var, &mut Ctx) -> Var>;

/// Random constants for one case and seed, drawn lazily and replayed
/// identically on every evaluation of the case.
pub struct Ctx {
    seed: u64,
    draws: u64,
}

impl Ctx {
    fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor<f64> {
        self.draws += 1;
        let mut rng = RngStream::new(self.seed, 1000 + self.draws);
        Tensor::from_fn(shape, |_| scale * rng.standard_normal())
    }
}

pub struct Case {
    pub name: &'static str,
    shape: Vec<usize>,
    /// `(lo, hi)` of the uniform point distribution.
    range: (f64, f64),
    build: Builder,
}

impl Case {
    fn new(
        name: &'static str,
        shape: &[usize],
        range: (f64, f64),
        build: impl Fn(&mut Graph<f64>, Var, &mut Ctx) -> Var + 'static,
    ) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
            range,
            build: Box::new(build),
        }
    }

    fn graph_at(&self, seed: u64, point: &Tensor<f64>) -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let x = g.leaf(point.clone(), true);
        let out = (self.build)(&mut g, x, &mut Ctx { seed, draws: 0 });
        (g, out)
    }

    /// A point for `seed` that keeps every kink at least `KINK_MARGIN` away.
    fn point(&self, seed: u64) -> Tensor<f64> {
        for attempt in 0..1000u64 {
            let mut rng = RngStream::new(seed, attempt);
            let (lo, hi) = self.range;
            let p = Tensor::from_fn(&self.shape, |_| rng.uniform_range(lo, hi));
            if self.graph_at(seed, &p).0.kink_margin() > KINK_MARGIN {
                return p;
            }
        }
        panic!("{}: no kink-free point found for seed {seed}", self.name);
    }

    /// Largest relative error over all coordinates at the seed's point.
    pub fn max_error(&self, seed: u64) -> f64 {
        let point = self.point(seed);
        finite_diff_check::<_, n2c::tensor::TensorError>(
            |g, x| Ok((self.build)(g, x, &mut Ctx { seed, draws: 0 })),
            &point,
            STEP,
        )
        .unwrap()
    }
}

/// `sum(y ⊙ r)` for a random `r`.
fn weighted(g: &mut Graph<f64>, y: Var, ctx: &mut Ctx) -> Var {
    let r = ctx.tensor(g.value(y).shape(), 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

fn tiny_unet() -> UNet {
    UNet::new(UNetConfig {
        in_channels: 1,
        out_channels: 1,
        depth: 1,
        base_channels: 2,
        kernel_size: 3,
    })
    .unwrap()
}

/// Registers He-scaled random parameters as constants.
fn unet_params(g: &mut Graph<f64>, unet: &UNet, ctx: &mut Ctx) -> Vec<Var> {
    unet.param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let scale = if name.ends_with("bias") { 0.1 } else { (2.0 / fan_in as f64).sqrt() };
            let t = ctx.tensor(&shape, scale);
            g.constant(t)
        })
        .collect()
}

fn random_mask(ctx: &mut Ctx, shape: &[usize]) -> Tensor<f64> {
    let n = ctx.tensor(&[shape[2], shape[3]], 1.0);
    let m = PixelMask::new(
        shape[2],
        shape[3],
        n.data().iter().map(|&v| u8::from(v > 0.0)).collect(),
    )
    .unwrap();
    PixelMask::batch_tensor(&[m], shape[1])
}

pub fn cases() -> Vec<Case> {
    let unit = (-1.0, 1.0);
    let pos = (0.0, 1.0);
    let mut v = vec![
        Case::new("conv2d input (3x3, stride 1, pad 1)", &[1, 2, 5, 5], unit, |g, x, c| {
            let w = g.constant(c.tensor(&[3, 2, 3, 3], 0.5));
            let b = g.constant(c.tensor(&[3], 0.5));
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            weighted(g, y, c)
        }),
        Case::new("conv2d input (3x3, stride 2, pad 1)", &[2, 2, 6, 6], unit, |g, x, c| {
            let w = g.constant(c.tensor(&[3, 2, 3, 3], 0.5));
            let b = g.constant(c.tensor(&[3], 0.5));
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            weighted(g, y, c)
        }),
        Case::new("conv2d weight", &[3, 2, 3, 3], unit, |g, w, c| {
            let x = g.constant(c.tensor(&[2, 2, 5, 5], 1.0));
            let b = g.constant(c.tensor(&[3], 0.5));
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            weighted(g, y, c)
        }),
        Case::new("conv2d bias", &[3], unit, |g, b, c| {
            let x = g.constant(c.tensor(&[1, 2, 4, 4], 1.0));
            let w = g.constant(c.tensor(&[3, 2, 1, 1], 0.5));
            let y = g.conv2d(x, w, b, 1, 0).unwrap();
            weighted(g, y, c)
        }),
        Case::new("relu", &[2, 3, 4, 4], unit, |g, x, c| {
            let y = g.relu(x);
            weighted(g, y, c)
        }),
        Case::new("maxpool2", &[2, 2, 4, 6], unit, |g, x, c| {
            let y = g.maxpool2(x).unwrap();
            weighted(g, y, c)
        }),
        Case::new("upsample_nearest2", &[1, 2, 3, 4], unit, |g, x, c| {
            let y = g.upsample_nearest2(x).unwrap();
            weighted(g, y, c)
        }),
        Case::new("concat_channels (first)", &[2, 2, 3, 3], unit, |g, x, c| {
            let other = g.constant(c.tensor(&[2, 1, 3, 3], 1.0));
            let y = g.concat_channels(x, other).unwrap();
            weighted(g, y, c)
        }),
        Case::new("concat_channels (second)", &[2, 1, 3, 3], unit, |g, x, c| {
            let other = g.constant(c.tensor(&[2, 2, 3, 3], 1.0));
            let y = g.concat_channels(other, x).unwrap();
            weighted(g, y, c)
        }),
        Case::new("add", &[3, 4], unit, |g, x, c| {
            let o = g.constant(c.tensor(&[3, 4], 1.0));
            let y = g.add(x, o).unwrap();
            weighted(g, y, c)
        }),
        Case::new("sub", &[3, 4], unit, |g, x, c| {
            let o = g.constant(c.tensor(&[3, 4], 1.0));
            let y = g.sub(o, x).unwrap();
            weighted(g, y, c)
        }),
        Case::new("mul", &[3, 4], unit, |g, x, c| {
            let o = g.constant(c.tensor(&[3, 4], 1.0));
            let y = g.mul(x, o).unwrap();
            let y = g.mul(y, x).unwrap();
            weighted(g, y, c)
        }),
        Case::new("mul (scalar broadcast)", &[], unit, |g, s, c| {
            let o = g.constant(c.tensor(&[2, 5], 1.0));
            let y = g.mul(o, s).unwrap();
            let y = g.square(y);
            weighted(g, y, c)
        }),
        Case::new("mul_scalar", &[6], unit, |g, x, c| {
            let y = g.mul_scalar(x, -1.7);
            weighted(g, y, c)
        }),
        Case::new("square", &[2, 7], unit, |g, x, c| {
            let y = g.square(x);
            weighted(g, y, c)
        }),
        Case::new("sum", &[2, 3, 2], unit, |g, x, c| {
            let y = g.square(x);
            let s = g.sum(y);
            let w = g.constant(c.tensor(&[], 1.0));
            let z = g.mul(s, w).unwrap();
            g.square(z)
        }),
        Case::new("mean", &[4, 5], unit, |g, x, _| {
            let y = g.square(x);
            g.mean(y)
        }),
        Case::new("unet depth 1 (input)", &[1, 1, 8, 8], pos, |g, x, c| {
            let unet = tiny_unet();
            let params = unet_params(g, &unet, c);
            let out = unet.forward(g, &params, x).unwrap();
            let target = g.constant(c.tensor(&[1, 1, 8, 8], 0.5));
            mse_loss(g, out, target).unwrap()
        }),
        Case::new("mse loss", &[2, 1, 4, 4], pos, |g, x, c| {
            let t = g.constant(c.tensor(&[2, 1, 4, 4], 0.5));
            mse_loss(g, x, t).unwrap()
        }),
        Case::new("masked mse loss", &[1, 3, 4, 4], pos, |g, x, c| {
            let t = g.constant(c.tensor(&[1, 3, 4, 4], 0.5));
            let m = g.constant(random_mask(c, &[1, 3, 4, 4]));
            masked_mse_loss(g, x, t, m).unwrap()
        }),
        Case::new("perceptual loss", &[1, 1, 8, 8], pos, |g, x, c| {
            let fx = FeatureExtractor::seeded(1, 5);
            let t = g.constant(c.tensor(&[1, 1, 8, 8], 0.5));
            perceptual_loss(g, x, t, &fx).unwrap()
        }),
        Case::new("combined loss", &[1, 1, 8, 8], pos, |g, x, c| {
            let fx = FeatureExtractor::seeded(1, 6);
            let t = g.constant(c.tensor(&[1, 1, 8, 8], 0.5));
            let w = LossWeights {
                mse: 1.0,
                perceptual: 0.5,
            };
            combined_loss(g, x, t, None, &w, &fx).unwrap()
        }),
    ];

    // Each parameter tensor of the tiny U-Net in turn, the rest fixed.
    let names: Vec<(String, Vec<usize>)> = tiny_unet().param_shapes();
    for (index, (name, shape)) in names.into_iter().enumerate() {
        let label: &'static str = Box::leak(format!("unet depth 1 ({name})").into_boxed_str());
        v.push(Case::new(label, &shape, unit, move |g, p, c| {
            let unet = tiny_unet();
            let mut params = unet_params(g, &unet, c);
            params[index] = p;
            let x = g.constant(c.tensor(&[1, 1, 8, 8], 0.5));
            let out = unet.forward(g, &params, x).unwrap();
            let target = g.constant(c.tensor(&[1, 1, 8, 8], 0.5));
            mse_loss(g, out, target).unwrap()
        }));
    }
    v
}

/// `(case name, worst error over all seeds)` for every case.
pub fn run_all() -> Vec<(&'static str, f64)> {
    cases()
        .iter()
        .map(|case| {
            let worst = (0..SEEDS).map(|s| case.max_error(s)).fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}
