use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::{check_channels, DataRole, DatasetManifest, LogEvent, TrainConfig, TrainError, TrainLogRecord};
use super::validate::{validate, ValidationReport, ValidationSet};
use crate::image::{Image, PixelMask};
use crate::io::read_image;
use crate::losses::{combined_loss, FeatureExtractor, LossWeights};
use crate::network::{build_unet, save_checkpoint, AdamState, Network, NetworkError, Parameters, UNet};
use crate::noise::{degrade, make_training_pair, sample_parameter, NoiseError, NoiseSpec, TrainingPair};
use crate::rng::{stream_id, RngStream, StreamTag};
use crate::tensor::Graph;

/// Images for one run. With [`DataRole::Clean`] the training images are
/// clean sources that get corrupted once; with [`DataRole::Observed`] they
/// are used as the noisy observations directly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub role: DataRole,
    pub train: Vec<Image>,
    pub val_ids: Vec<String>,
    pub val: Vec<Image>,
}

impl TrainingSet {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self, TrainError> {
        let train = manifest.train().map(read_image).collect::<Result<Vec<_>, _>>()?;
        let val_paths: Vec<&Path> = manifest.val().collect();
        let val = val_paths.iter().map(read_image).collect::<Result<Vec<_>, _>>()?;
        let val_ids = val_paths
            .iter()
            .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into()))
            .collect();
        Ok(Self {
            role: manifest.role,
            train,
            val_ids,
            val,
        })
    }
}

/// A fixed noisy observation of a clean source.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedImage {
    pub image: Image,
    pub mask: Option<PixelMask>,
    /// Stage-one parameter drawn for this image.
    pub param: f64,
}

/// Corrupts every clean image exactly once with a stage-one parameter. The
/// result depends only on the images, the noise spec and the seed.
pub fn synthesize_observed(clean: &[Image], spec: &NoiseSpec, seed: u64) -> Result<Vec<ObservedImage>, NoiseError> {
    spec.validate()?;
    clean
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = RngStream::derive(seed, StreamTag::Observed, &[i as u64]);
            let param = sample_parameter(spec.stage1, &mut rng);
            let (image, mask) = degrade(x, spec.kind, param, &mut rng)?;
            Ok(ObservedImage { image, mask, param })
        })
        .collect()
}

/// Stream ids used for the crop and the `z` synthesis of one batch slot.
pub fn training_stream_ids(epoch: usize, step: usize, slot: usize) -> [u64; 2] {
    let c = [epoch as u64, step as u64, slot as u64];
    [stream_id(StreamTag::Crop, &c), stream_id(StreamTag::TrainingPair, &c)]
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub records: Vec<TrainLogRecord>,
    /// Metrics after the last epoch, when clean validation images exist.
    pub validation: Option<ValidationReport>,
    /// Stage-one parameter per training image (empty for observed data).
    pub observed_params: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

struct LogSink {
    path: Option<PathBuf>,
    file: Option<BufWriter<File>>,
    records: Vec<TrainLogRecord>,
}

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self, TrainError> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(out_err(dir))?;
                }
                Some(BufWriter::new(File::create(p).map_err(out_err(p))?))
            }
            None => None,
        };
        Ok(Self {
            path: path.map(Path::to_path_buf),
            file,
            records: Vec::new(),
        })
    }

    fn push(&mut self, record: TrainLogRecord) -> Result<(), TrainError> {
        if let (Some(f), Some(p)) = (&mut self.file, &self.path) {
            let line = serde_json::to_string(&record).expect("log record serializes");
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(out_err(p))?;
        }
        self.records.push(record);
        Ok(())
    }
}

fn out_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Output {
        path: path.display().to_string(),
        source,
    }
}

/// Random square crop of `y` for one batch slot, then a fresh `z`.
fn sample_slot(
    y: &Image,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
    slot: usize,
) -> Result<(Image, TrainingPair), TrainError> {
    let [crop_id, pair_id] = training_stream_ids(epoch, step, slot);
    let p = config.patch_size;
    let mut crop_rng = RngStream::new(config.seed, crop_id);
    let top = crop_rng.below(y.height() - p + 1);
    let left = crop_rng.below(y.width() - p + 1);
    let patch = if (y.height(), y.width()) == (p, p) {
        y.clone()
    } else {
        y.crop(top, left, p, p).expect("offsets within bounds")
    };
    let pair = make_training_pair(&patch, &config.noise, &mut RngStream::new(config.seed, pair_id))?;
    Ok((patch, pair))
}

/// Forward, loss, backward. Returns the loss and leaves gradients in
/// `params`; nothing is accumulated when the loss is not finite.
fn loss_and_grads(
    unet: &UNet,
    params: &mut Parameters<f32>,
    fx: &FeatureExtractor,
    weights: &LossWeights,
    slots: &[(Image, TrainingPair)],
) -> Result<f32, TrainError> {
    let ys: Vec<Image> = slots.iter().map(|(y, _)| y.clone()).collect();
    let zs: Vec<Image> = slots.iter().map(|(_, p)| p.z.clone()).collect();
    let masks: Option<Vec<PixelMask>> = slots.iter().map(|(_, p)| p.mask.clone()).collect();

    let mut g = Graph::<f32>::new();
    let vars = params.register(&mut g, true);
    let z = g.constant(Image::batch_tensor(&zs));
    let y = g.constant(Image::batch_tensor(&ys));
    let mask = masks.map(|m| g.constant(PixelMask::batch_tensor(&m, ys[0].channels())));
    let out = unet.forward(&mut g, &vars, z)?;
    let loss = combined_loss(&mut g, out, y, mask, weights, fx)?;
    let value = g.value(loss).item().expect("loss is a scalar");
    if value.is_finite() {
        g.backward(loss).map_err(NetworkError::from)?;
        params.accumulate_grads(&g, &vars);
    }
    Ok(value)
}

/// Full training run; see [`TrainConfig`] for the knobs. Deterministic for a
/// given seed regardless of thread count.
pub fn train(set: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let channels = config.unet.in_channels;
    check_channels(&set.train, channels)?;
    check_channels(&set.val, channels)?;

    let (observed, observed_params) = match set.role {
        DataRole::Clean => {
            let obs = synthesize_observed(&set.train, &config.noise, config.seed)?;
            let params = obs.iter().map(|o| o.param).collect();
            (obs.into_iter().map(|o| o.image).collect(), params)
        }
        DataRole::Observed => (set.train.clone(), Vec::new()),
    };
    let p = config.patch_size;
    let usable: Vec<&Image> = observed
        .iter()
        .enumerate()
        .filter_map(|(i, y)| {
            if y.height() >= p && y.width() >= p {
                Some(y)
            } else {
                warn!("skipping training image {i}: {}x{} is smaller than the {p}x{p} patch", y.height(), y.width());
                None
            }
        })
        .collect();
    if usable.is_empty() {
        return Err(TrainError::NoUsableImages { patch: p });
    }

    let val_set = match set.role {
        DataRole::Clean if !set.val.is_empty() => Some(ValidationSet::corrupt(
            set.val_ids.clone(),
            set.val.clone(),
            config.noise.kind,
            config.validation_param,
            config.seed,
        )?),
        _ => None,
    };
    let noisy_report = match &val_set {
        Some(v) => Some(v.noisy_report(&config.ssim)?),
        None => None,
    };

    let (unet, mut params) = build_unet(config.unet, &mut RngStream::derive(config.seed, StreamTag::Init, &[]))?;
    let fx = FeatureExtractor::seeded(channels, config.feature_seed);
    let mut adam = AdamState::new(config.adam, &params);
    let mut log = LogSink::open(config.log_path.as_deref())?;
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(out_err(dir))?;
    }

    let mut step = 0;
    let mut validation = None;
    let mut final_checkpoint = None;
    for epoch in 1..=config.epochs {
        let order = RngStream::derive(config.seed, StreamTag::Shuffle, &[epoch as u64]).permutation(usable.len());
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let slots = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| sample_slot(usable[i], config, epoch, step, slot))
                .collect::<Result<Vec<_>, _>>()?;
            let loss = loss_and_grads(&unet, &mut params, &fx, &config.loss, &slots)?;
            if !loss.is_finite() {
                let mut r = TrainLogRecord::new(LogEvent::Abort, epoch, step);
                r.message = Some(format!("loss became {loss}"));
                log.push(r)?;
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            adam.step(&mut params)?;
            losses.push(loss as f64);
            let mut r = TrainLogRecord::new(LogEvent::Step, epoch, step);
            r.loss = Some(loss as f64);
            log.push(r)?;
        }

        let mut r = TrainLogRecord::new(LogEvent::Epoch, epoch, step);
        r.loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        let network = Network::new(unet.clone(), params.clone())?;
        if let (Some(v), Some(noisy)) = (&val_set, &noisy_report) {
            let denoised = validate(&network, v, &config.ssim)?;
            r.val_psnr_db = Some(denoised.mean_psnr_db);
            r.val_ssim = Some(denoised.mean_ssim);
            r.noisy_psnr_db = Some(noisy.mean_psnr_db);
            r.noisy_ssim = Some(noisy.mean_ssim);
            validation = Some(ValidationReport {
                noisy: noisy.clone(),
                denoised,
            });
        }
        info!(
            "epoch {epoch}/{}: loss {:.6}{}",
            config.epochs,
            r.loss.unwrap_or(f64::NAN),
            r.val_psnr_db.map_or(String::new(), |v| format!(", val psnr {v:.2} dB"))
        );
        log.push(r)?;
        if let Some(dir) = &config.checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:03}.n2ck"));
            save_checkpoint(&path, &params, &config.unet, &config.refine)?;
            if epoch == config.epochs {
                let last = dir.join("final.n2ck");
                save_checkpoint(&last, &params, &config.unet, &config.refine)?;
                final_checkpoint = Some(last);
            }
        }
    }

    Ok(TrainOutcome {
        network: Network::new(unet, params)?,
        records: log.records,
        validation,
        observed_params,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{AdamConfig, UNetConfig};
    use crate::noise::{NoiseKind, ParamRange};
    use crate::trainer::synthetic_corpus;
    use std::collections::HashSet;

    fn tiny_config(kind: NoiseKind) -> TrainConfig {
        let mut c = TrainConfig::for_kind(kind);
        c.unet = UNetConfig {
            depth: 1,
            base_channels: 4,
            ..Default::default()
        };
        c.patch_size = 16;
        c.epochs = 2;
        c.batch_size = 2;
        c.seed = 11;
        c
    }

    fn tiny_set(n: usize) -> TrainingSet {
        TrainingSet {
            role: DataRole::Clean,
            train: synthetic_corpus(n, 24, 1, 3, 0),
            val_ids: vec!["v0".into(), "v1".into()],
            val: synthetic_corpus(2, 16, 1, 3, 1000),
        }
    }

    #[test]
    fn degenerate_range_gives_exact_sigma() {
        let mut spec = NoiseSpec::gaussian();
        spec.stage1 = ParamRange::fixed(0.1);
        let clean = vec![Image::filled(4, 4, 1, 0.5).unwrap(); 5];
        let obs = synthesize_observed(&clean, &spec, 1).unwrap();
        assert!(obs.iter().all(|o| o.param == 0.1));
        assert_eq!(obs, synthesize_observed(&clean, &spec, 1).unwrap());
        assert_ne!(obs[0].image, synthesize_observed(&clean, &spec, 2).unwrap()[0].image);
    }

    #[test]
    fn stage_one_draws_span_range() {
        // Uniform draws: each 10% tail is missed by all 300 with
        // probability 0.9^300, far below any realistic failure rate.
        let spec = NoiseSpec::gaussian();
        let clean = vec![Image::filled(2, 2, 1, 0.5).unwrap(); 300];
        let obs = synthesize_observed(&clean, &spec, 4).unwrap();
        let (lo, hi) = (spec.stage1.lo, spec.stage1.hi);
        let w = hi - lo;
        let min = obs.iter().map(|o| o.param).fold(f64::INFINITY, f64::min);
        let max = obs.iter().map(|o| o.param).fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= lo && max <= hi);
        assert!(min < lo + 0.1 * w && max > hi - 0.1 * w, "{min} {max}");
    }

    #[test]
    fn stream_ids_are_distinct() {
        let mut seen = HashSet::new();
        for e in 0..6 {
            for s in 0..60 {
                for k in 0..8 {
                    for id in training_stream_ids(e, s, k) {
                        assert!(seen.insert(id));
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_run() {
        let set = tiny_set(4);
        let config = tiny_config(NoiseKind::Gaussian);
        let a = train(&set, &config).unwrap();
        let b = train(&set, &config).unwrap();
        assert_eq!(a.network.params(), b.network.params());
        assert_eq!(a.records, b.records);
        let steps: Vec<(usize, usize)> = a.records.iter().map(|r| (r.epoch, r.step)).collect();
        assert!(steps.windows(2).all(|w| w[0] <= w[1]));
        let v = a.validation.unwrap();
        assert_eq!(v.denoised.rows.len(), 2);
    }

    #[test]
    fn bernoulli_run_and_small_images_skipped() {
        let mut set = tiny_set(3);
        set.train.push(Image::filled(8, 8, 1, 0.5).unwrap());
        let out = train(&set, &tiny_config(NoiseKind::Bernoulli)).unwrap();
        // 3 usable images, batch 2: two steps per epoch.
        assert_eq!(out.records.iter().filter(|r| r.event == LogEvent::Step).count(), 4);
    }

    #[test]
    fn rejects_too_small_and_wrong_channels() {
        let mut set = tiny_set(1);
        set.train = vec![Image::filled(8, 8, 1, 0.5).unwrap()];
        assert!(matches!(
            train(&set, &tiny_config(NoiseKind::Gaussian)),
            Err(TrainError::NoUsableImages { patch: 16 })
        ));
        set.train = vec![Image::filled(16, 16, 3, 0.5).unwrap()];
        assert!(matches!(
            train(&set, &tiny_config(NoiseKind::Gaussian)),
            Err(TrainError::Channels { .. })
        ));
    }

    #[test]
    fn diverging_run_aborts_with_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(NoiseKind::Gaussian);
        config.adam = AdamConfig {
            learning_rate: 1e30,
            ..Default::default()
        };
        config.log_path = Some(dir.path().join("log.jsonl"));
        config.epochs = 20;
        let err = train(&tiny_set(2), &config).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { .. }), "{err}");
        let text = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let last: TrainLogRecord = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last.event, LogEvent::Abort);
    }

    #[test]
    fn overfits_single_image() {
        // One fixed y: the network can memorize it, so the loss collapses.
        let set = TrainingSet {
            role: DataRole::Clean,
            train: synthetic_corpus(1, 16, 1, 8, 0),
            val_ids: vec![],
            val: vec![],
        };
        let mut config = tiny_config(NoiseKind::Gaussian);
        config.loss.perceptual = 0.0;
        config.batch_size = 1;
        config.epochs = 200;
        config.unet.base_channels = 8;
        config.adam.learning_rate = 2e-3;
        let out = train(&set, &config).unwrap();
        let losses: Vec<f64> = out
            .records
            .iter()
            .filter(|r| r.event == LogEvent::Step)
            .map(|r| r.loss.unwrap())
            .collect();
        assert_eq!(losses.len(), 200);
        let last10 = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(last10 < 0.1 * losses[0], "first {} last {}", losses[0], last10);
    }

    #[test]
    fn writes_checkpoints_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(NoiseKind::Poisson);
        config.loss.perceptual = 0.2;
        config.checkpoint_dir = Some(dir.path().join("ck"));
        config.log_path = Some(dir.path().join("logs/train.jsonl"));
        let out = train(&tiny_set(2), &config).unwrap();
        assert!(dir.path().join("ck/epoch_001.n2ck").exists());
        let fin = crate::network::load_checkpoint(out.final_checkpoint.unwrap()).unwrap();
        let values = |p: &Parameters<f32>| p.iter().map(|e| (e.name.clone(), e.value.clone())).collect::<Vec<_>>();
        assert_eq!(values(&fin.params), values(out.network.params()));
        assert_eq!(fin.refine.num_iters, 100);
        let lines = fs::read_to_string(dir.path().join("logs/train.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), out.records.len());
    }
}
