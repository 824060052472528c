use std::sync::Mutex;

use n2c::config::RunConfig;
use n2c::image::{Image, PixelMask};
use n2c::inference::{denoise, refine, Denoiser, InferenceError, RefineConfig};
use n2c::io::{decode_pnm, encode_pnm};
use n2c::losses::{masked_mse_loss, mse_loss, perceptual_loss, FeatureExtractor};
use n2c::metrics::{evaluate_pairs, psnr, ssim, SsimParams};
use n2c::network::{build_unet, decode_checkpoint, encode_checkpoint, Network, UNetConfig};
use n2c::noise::{degrade, degrade_bernoulli, degrade_gaussian, NoiseKind};
use n2c::rng::RngStream;
use n2c::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = RngStream::new(seed, 0);
    Image::from_fn(h, w, c, |_, _, _| rng.uniform() as f32).unwrap()
}

fn random_mask(h: usize, w: usize, seed: u64, density: f64) -> PixelMask {
    let mut rng = RngStream::new(seed, 1);
    PixelMask::new(h, w, (0..h * w).map(|_| u8::from(rng.bernoulli(density))).collect()).unwrap()
}

fn small_net(seed: u64) -> Network {
    let cfg = UNetConfig {
        in_channels: 1,
        out_channels: 1,
        depth: 1,
        base_channels: 4,
        kernel_size: 3,
    };
    let (unet, params) = build_unet(cfg, &mut RngStream::new(seed, 0)).unwrap();
    Network::new(unet, params).unwrap()
}

/// Masked MSE of `pred` against `target` in single precision.
fn masked_loss(pred: &Image, target: &Image, mask: &PixelMask) -> f32 {
    let mut g = Graph::<f32>::new();
    let p = g.constant(pred.to_tensor());
    let t = g.constant(target.to_tensor());
    let m = g.constant(PixelMask::batch_tensor(std::slice::from_ref(mask), pred.channels()));
    let l = masked_mse_loss(&mut g, p, t, m).unwrap();
    g.value(l).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn masked_loss_ignores_unobserved_pixels(
        seed in any::<u64>(),
        channels in prop::sample::select(vec![1usize, 3]),
        density in 0.05f64..0.95,
        value in -2.0f32..2.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let (h, w) = (9, 7);
        let pred = random_image(h, w, channels, seed);
        let target = random_image(h, w, channels, seed ^ 0xabc);
        let mask = random_mask(h, w, seed, density);
        let hidden: Vec<usize> = (0..h * w).filter(|&i| mask.data()[i] == 0).collect();
        prop_assume!(!hidden.is_empty());
        let i = hidden[pick.index(hidden.len())];
        let c = pick.index(channels);
        let before = masked_loss(&pred, &target, &mask);
        let mut moved = pred.clone();
        moved.data_mut()[c * h * w + i] = value;
        let after = masked_loss(&moved, &target, &mask);
        prop_assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn masked_loss_gradient_vanishes_off_mask(seed in any::<u64>(), density in 0.05f64..0.95) {
        let (h, w, c) = (6, 5, 3);
        let pred = random_image(h, w, c, seed);
        let target = random_image(h, w, c, !seed);
        let mask = random_mask(h, w, seed, density);
        let mut g = Graph::<f64>::new();
        let p = g.leaf(pred.to_tensor(), true);
        let t = g.constant(target.to_tensor());
        let m = g.constant(PixelMask::batch_tensor(std::slice::from_ref(&mask), c));
        let l = masked_mse_loss(&mut g, p, t, m).unwrap();
        prop_assert!(g.value(l).item().unwrap() >= 0.0);
        g.backward(l).unwrap();
        let grad = g.grad(p).unwrap().data();
        for ch in 0..c {
            for i in 0..h * w {
                if mask.data()[i] == 0 {
                    prop_assert_eq!(grad[ch * h * w + i], 0.0);
                }
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_equal_inputs(seed in any::<u64>()) {
        let fx = FeatureExtractor::seeded(1, seed);
        let a = random_image(8, 8, 1, seed);
        let b = random_image(8, 8, 1, seed.wrapping_add(1));
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a.to_tensor()), g.constant(b.to_tensor()));
        let m = mse_loss(&mut g, va, vb).unwrap();
        let p = perceptual_loss(&mut g, va, vb, &fx).unwrap();
        let m0 = mse_loss(&mut g, va, va).unwrap();
        let p0 = perceptual_loss(&mut g, va, va, &fx).unwrap();
        prop_assert!(g.value(m).item().unwrap() > 0.0);
        prop_assert!(g.value(p).item().unwrap() >= 0.0);
        prop_assert_eq!(g.value(m0).item().unwrap(), 0.0);
        prop_assert_eq!(g.value(p0).item().unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = RngStream::new(seed, 0);
        let x0 = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.standard_normal());
        let w0 = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.standard_normal());
        let grads = |ca: f64, cb: f64| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(x0.clone(), true);
            let w = g.constant(w0.clone());
            let bias = g.constant(Tensor::zeros(&[3]));
            let y = g.conv2d(x, w, bias, 1, 1).unwrap();
            let r = g.relu(y);
            let l1 = g.mean(r);
            let sq = g.square(x);
            let l2 = g.sum(sq);
            let s1 = g.mul_scalar(l1, ca);
            let s2 = g.mul_scalar(l2, cb);
            let l = g.add(s1, s2).unwrap();
            g.backward(l).unwrap();
            g.grad(x).unwrap().clone()
        };
        let (g1, g2, gab) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(a, b));
        for i in 0..gab.numel() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((gab.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn pool_and_concat_route_gradient_mass(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let x0 = Tensor::from_fn(&[2, 3, 4, 6], |_| rng.standard_normal());
        let r0 = Tensor::from_fn(&[2, 3, 2, 3], |_| rng.standard_normal());
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0, true);
        let p = g.maxpool2(x).unwrap();
        let r = g.constant(r0.clone());
        let pr = g.mul(p, r).unwrap();
        let l = g.sum(pr);
        g.backward(l).unwrap();
        let total: f64 = g.grad(x).unwrap().data().iter().sum();
        let upstream: f64 = r0.data().iter().sum();
        prop_assert!((total - upstream).abs() < 1e-12);
        let nonzero = g.grad(x).unwrap().data().iter().filter(|v| **v != 0.0).count();
        prop_assert!(nonzero <= r0.numel());

        let a0 = Tensor::from_fn(&[1, 2, 3, 3], |_| rng.standard_normal());
        let b0 = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.standard_normal());
        let w0 = Tensor::from_fn(&[1, 3, 3, 3], |_| rng.standard_normal());
        let mut g = Graph::<f64>::new();
        let a = g.leaf(a0, true);
        let b = g.leaf(b0, true);
        let c = g.concat_channels(a, b).unwrap();
        let w = g.constant(w0.clone());
        let cw = g.mul(c, w).unwrap();
        let l = g.sum(cw);
        g.backward(l).unwrap();
        let mut joined = g.grad(a).unwrap().data().to_vec();
        joined.extend_from_slice(g.grad(b).unwrap().data());
        prop_assert_eq!(joined, w0.data().to_vec());
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let net = small_net(seed);
        let x = random_image(2 * h, 2 * w, 1, seed).to_tensor::<f32>();
        let a = net.forward_tensor(&x).unwrap();
        let b = net.forward_tensor(&x).unwrap();
        prop_assert_eq!(a.shape(), x.shape());
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn degradations_stay_in_range_and_are_reproducible(
        seed in any::<u64>(),
        kind in prop::sample::select(vec![NoiseKind::Gaussian, NoiseKind::Bernoulli, NoiseKind::Poisson]),
        raw in 0.0f64..1.0,
    ) {
        let param = match kind {
            NoiseKind::Gaussian => raw * 0.5,
            NoiseKind::Bernoulli => raw,
            NoiseKind::Poisson => 1.0 + raw * 100.0,
        };
        let x = random_image(10, 12, 3, seed);
        let (a, ma) = degrade(&x, kind, param, &mut RngStream::new(seed, 7)).unwrap();
        let (b, mb) = degrade(&x, kind, param, &mut RngStream::new(seed, 7)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(ma, mb);
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bernoulli_support_only_shrinks(seed in any::<u64>(), q1 in 0.0f64..=1.0, q2 in 0.0f64..=1.0) {
        // Strictly positive clean pixels, so support(x) is everything.
        let mut x = random_image(16, 16, 3, seed);
        for v in x.data_mut() {
            *v = 0.05 + 0.9 * *v;
        }
        let (y, my) = degrade_bernoulli(&x, q1, &mut RngStream::new(seed, 1)).unwrap();
        let (z, mz) = degrade_bernoulli(&y, q2, &mut RngStream::new(seed, 2)).unwrap();
        prop_assert_eq!(PixelMask::observed(&y), my.clone());
        for i in 0..z.data().len() {
            if z.data()[i] != 0.0 {
                prop_assert!(y.data()[i] != 0.0);
            }
            if y.data()[i] != 0.0 {
                prop_assert!(x.data()[i] != 0.0);
            }
        }
        for i in 0..256 {
            prop_assert!(mz.data()[i] <= my.data()[i] || y.data()[i] == 0.0);
        }
    }

    #[test]
    fn ssim_is_bounded_symmetric_and_flip_invariant(seed in any::<u64>(), sigma in 0.0f64..0.5, channels in prop::sample::select(vec![1usize, 3])) {
        let params = SsimParams::default();
        let x = random_image(16, 13, channels, seed);
        let y = degrade_gaussian(&x, sigma, &mut RngStream::new(seed, 3)).unwrap();
        let s = ssim(&x, &y, &params).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&y, &x, &params).unwrap()).abs() <= 1e-12);
        let (fx, fy) = (x.flip_horizontal(), y.flip_horizontal());
        prop_assert!((s - ssim(&fx, &fy, &params).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
        prop_assert!((psnr(&x, &y, 1.0).unwrap() - psnr(&fx, &fy, 1.0).unwrap()).abs() <= 1e-12);
        prop_assert!((ssim(&x, &x, &params).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn report_means_ignore_pair_order(seed in any::<u64>(), n in 1usize..8, rot in 0usize..8) {
        let refs: Vec<Image> = (0..n).map(|i| random_image(12, 12, 1, seed.wrapping_add(i as u64))).collect();
        let preds: Vec<Image> = refs
            .iter()
            .enumerate()
            .map(|(i, r)| degrade_gaussian(r, 0.02 * (i + 1) as f64, &mut RngStream::new(seed, i as u64)).unwrap())
            .collect();
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let params = SsimParams::default();
        let a = evaluate_pairs(&ids, &preds, &refs, &params).unwrap();
        let k = rot % n;
        let b = evaluate_pairs(&rotated(&ids, k), &rotated(&preds, k), &rotated(&refs, k), &params).unwrap();
        prop_assert_eq!(a.mean_psnr_db, b.mean_psnr_db);
        prop_assert_eq!(a.mean_ssim, b.mean_ssim);
    }
}

fn rotated<T: Clone>(v: &[T], k: usize) -> Vec<T> {
    v[k..].iter().chain(&v[..k]).cloned().collect()
}

#[test]
fn psnr_falls_as_noise_grows() {
    let x = random_image(32, 32, 1, 11);
    let values: Vec<f64> = [5.0, 10.0, 20.0, 40.0]
        .iter()
        .map(|s| {
            let y = degrade_gaussian(&x, s / 255.0, &mut RngStream::new(3, 0)).unwrap();
            psnr(&y, &x, 1.0).unwrap()
        })
        .collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
}

/// Wraps a denoiser and records the largest `|f(v) − v|` it has produced.
struct Recording<D> {
    inner: D,
    max_step: Mutex<f32>,
}

impl<D: Denoiser> Denoiser for Recording<D> {
    fn spatial_multiple(&self) -> usize {
        self.inner.spatial_multiple()
    }

    fn apply(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError> {
        let out = self.inner.apply(batch)?;
        let m = out.data().iter().zip(batch.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        let mut max = self.max_step.lock().unwrap();
        *max = max.max(m);
        Ok(out)
    }
}

/// `f(v) = a·v + b`.
struct Affine(f32, f32);

impl Denoiser for Affine {
    fn apply(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError> {
        Ok(batch.map(|v| self.0 * v + self.1))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn refinement_moves_at_most_n_alpha_steps(seed in any::<u64>(), alpha in 0.0f32..=1.0, iters in 0usize..12) {
        let net = Recording { inner: small_net(seed), max_step: Mutex::new(0.0) };
        let y = random_image(8, 8, 1, seed);
        let cfg = RefineConfig { num_iters: iters, alpha };
        let refined = refine(&net, &y, &cfg).unwrap();
        let single = refine(&net, &y, &RefineConfig { num_iters: 0, alpha }).unwrap();
        let bound = iters as f32 * alpha * *net.max_step.lock().unwrap();
        let gap = refined.data().iter().zip(single.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        prop_assert!(gap <= bound * (1.0 + 1e-5) + 1e-6, "gap {} bound {}", gap, bound);
        prop_assert_eq!(single, denoise(&net.inner, &y).unwrap());
    }

    #[test]
    fn refinement_keeps_fixed_points(eighths in 0u8..8, level in 0u16..=256, alpha in 0.0f32..=1.0, iters in 0usize..50) {
        // Dyadic values keep `a·v + b` exact, so `f(v*) = v*` holds in f32.
        let a = eighths as f32 / 8.0;
        let fixed = level as f32 / 256.0;
        let f = Affine(a, fixed - a * fixed);
        let y = Image::filled(5, 6, 1, fixed).unwrap();
        let out = refine(&f, &y, &RefineConfig { num_iters: iters, alpha }).unwrap();
        prop_assert_eq!(out, y);
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        kind in prop::sample::select(vec![NoiseKind::Gaussian, NoiseKind::Bernoulli, NoiseKind::Poisson]),
        lr in 1e-6f64..1e-1,
        lo in 0.0f64..0.3,
        width in 0.0f64..0.3,
        alpha in 0.0f32..=1.0,
        iters in 0usize..200,
        epochs in 1usize..100,
        depth in 1usize..4,
    ) {
        let mut cfg = RunConfig::for_kind(kind);
        cfg.manifest = Some("data/some manifest.txt".into());
        let t = &mut cfg.train;
        t.seed = seed;
        t.adam.learning_rate = lr;
        if kind != NoiseKind::Poisson {
            t.noise.stage2.lo = lo;
            t.noise.stage2.hi = lo + width;
        }
        t.refine = RefineConfig { num_iters: iters, alpha };
        t.epochs = epochs;
        t.unet.depth = depth;
        t.patch_size = 64;
        t.checkpoint_dir = Some("out/ck".into());
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), depth in 1usize..3, base in 1usize..6, alpha in 0.0f32..=1.0) {
        let cfg = UNetConfig { in_channels: 3, out_channels: 3, depth, base_channels: base, kernel_size: 3 };
        let (_, params) = build_unet(cfg, &mut RngStream::new(seed, 0)).unwrap();
        let refine_cfg = RefineConfig { num_iters: 7, alpha };
        let bytes = encode_checkpoint(&params, &cfg, &refine_cfg);
        let ck = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(ck.config, cfg);
        prop_assert_eq!(ck.refine, refine_cfg);
        for (a, b) in ck.params.iter().zip(params.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.value, &b.value);
        }
        prop_assert_eq!(encode_checkpoint(&ck.params, &ck.config, &ck.refine), bytes);
        prop_assert_eq!(params.scalar_count(), cfg.parameter_count());
    }

    #[test]
    fn pgm_round_trips_quantized_images(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, channels in prop::sample::select(vec![1usize, 3])) {
        let mut rng = RngStream::new(seed, 0);
        let x = Image::from_fn(h, w, channels, |_, _, _| rng.below(256) as f32 / 255.0).unwrap();
        let bytes = encode_pnm(&x);
        let back = decode_pnm(&bytes).unwrap();
        prop_assert_eq!(&back, &x);
        prop_assert_eq!(encode_pnm(&back), bytes);
    }
}
