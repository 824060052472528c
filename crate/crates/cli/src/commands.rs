use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use n2c::config::{ConfigError, RunConfig};
use n2c::image::Image;
use n2c::inference::{refine, InferenceError};
use n2c::io::{read_image, write_image, write_mask, ImageFormat, ImageIoError};
use n2c::metrics::{evaluate_pairs, MetricsError, SsimParams};
use n2c::network::{load_checkpoint, CheckpointError};
use n2c::noise::{degrade, NoiseError, NoiseKind};
use n2c::rng::{stream_id, RngStream, StreamTag};
use n2c::trainer::{synthetic_image, train as run_training, DatasetManifest, ManifestError, TrainError, TrainingSet};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: ImageIoError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("{path}: {source}")]
    Inference {
        path: String,
        #[source]
        source: InferenceError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("config has no `data.manifest` entry")]
    NoManifest,
    #[error("no images (.pgm, .ppm, .png) in {0}")]
    NoImages(String),
    #[error("unpaired files: {}", .0.join(", "))]
    Unpaired(Vec<String>),
    #[error("prediction and reference directories share no file names")]
    NoPairs,
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Fs {
        path: path.display().to_string(),
        source,
    }
}

fn read(path: &Path) -> Result<Image, CliError> {
    read_image(path).map_err(|source| CliError::Image {
        path: path.display().to_string(),
        source,
    })
}

fn write(image: &Image, path: &Path) -> Result<(), CliError> {
    write_image(image, path).map_err(|source| CliError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Supported images in `dir`, keyed and ordered by file name. Mask
/// sidecars are skipped.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(fs_err(dir))? {
        let path = entry.map_err(fs_err(dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if path.is_file() && ImageFormat::from_path(&path).is_some() && !name.ends_with(".mask.pgm") {
            out.insert(name.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// FNV-1a; stable across platforms and releases.
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn corrupt(model: NoiseKind, param: f64, seed: u64, input: &Path, output: &Path) -> Result<(), CliError> {
    model.check_param(param)?;
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(CliError::NoImages(input.display().to_string()));
    }
    fs::create_dir_all(output).map_err(fs_err(output))?;
    let lines = files
        .par_iter()
        .map(|(name, path)| {
            let x = read(path)?;
            let mut rng = RngStream::new(seed, stream_id(StreamTag::Corrupt, &[name_hash(name)]));
            let (y, mask) = degrade(&x, model, param, &mut rng)?;
            write(&y, &output.join(name))?;
            let mut line = format!("{name}\tmodel={model}\tparam={param}");
            if let Some(mask) = mask {
                let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
                let mask_path = output.join(format!("{stem}.mask.pgm"));
                write_mask(&mask, &mask_path).map_err(|source| CliError::Image {
                    path: mask_path.display().to_string(),
                    source,
                })?;
                line.push_str(&format!("\tdensity={:.6}", mask.density()));
            }
            Ok(line)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    for l in lines {
        println!("{l}");
    }
    Ok(())
}

pub fn train(config_path: &Path, dry_run: bool) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    print!("{}", config.to_text());
    if dry_run {
        return Ok(());
    }
    let manifest_path = config.manifest.as_ref().ok_or(CliError::NoManifest)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let set = TrainingSet::from_manifest(&manifest)?;
    info!(
        "training on {} images ({} validation), {} epochs",
        set.train.len(),
        set.val.len(),
        config.train.epochs
    );
    let outcome = run_training(&set, &config.train)?;
    if let Some(v) = &outcome.validation {
        println!(
            "validation: noisy {:.4} dB / {:.4}, denoised {:.4} dB / {:.4}",
            v.noisy.mean_psnr_db, v.noisy.mean_ssim, v.denoised.mean_psnr_db, v.denoised.mean_ssim
        );
    }
    if let Some(p) = &outcome.final_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

pub fn denoise(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    refine_iters: Option<usize>,
    alpha: Option<f32>,
) -> Result<(), CliError> {
    let ck_err = |source| CliError::Checkpoint {
        path: checkpoint.display().to_string(),
        source,
    };
    let ck = load_checkpoint(checkpoint).map_err(ck_err)?;
    let mut cfg = ck.refine;
    if let Some(n) = refine_iters {
        cfg.num_iters = n;
    }
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    cfg.validate().map_err(|e| CliError::Argument(e.to_string()))?;
    let net = ck.into_network().map_err(ck_err)?;
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(CliError::NoImages(input.display().to_string()));
    }
    fs::create_dir_all(output).map_err(fs_err(output))?;
    files.par_iter().try_for_each(|(name, path)| {
        let y = read(path)?;
        let out = refine(&net, &y, &cfg).map_err(|source| CliError::Inference {
            path: path.display().to_string(),
            source,
        })?;
        write(&out, &output.join(name))
    })?;
    println!(
        "denoised {} images (refine iters {}, alpha {})",
        files.len(),
        cfg.num_iters,
        cfg.alpha
    );
    Ok(())
}

pub fn eval(pred: &Path, reference: &Path, report: &Path) -> Result<(), CliError> {
    let preds = list_images(pred)?;
    let refs = list_images(reference)?;
    let unpaired: Vec<String> = preds
        .keys()
        .filter(|k| !refs.contains_key(*k))
        .map(|k| format!("{} (prediction only)", k))
        .chain(
            refs.keys()
                .filter(|k| !preds.contains_key(*k))
                .map(|k| format!("{} (reference only)", k)),
        )
        .collect();
    let names: Vec<&String> = preds.keys().filter(|k| refs.contains_key(*k)).collect();
    if names.is_empty() {
        return Err(CliError::NoPairs);
    }
    if !unpaired.is_empty() {
        return Err(CliError::Unpaired(unpaired));
    }
    let p = names.par_iter().map(|n| read(&preds[*n])).collect::<Result<Vec<_>, _>>()?;
    let r = names.par_iter().map(|n| read(&refs[*n])).collect::<Result<Vec<_>, _>>()?;
    let result = evaluate_pairs(&names, &p, &r, &SsimParams::default())?;
    let text = if report.extension().is_some_and(|e| e == "jsonl") {
        result.to_jsonl()
    } else {
        result.to_csv()
    };
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    fs::write(report, text).map_err(fs_err(report))?;
    println!(
        "{} pairs: mean psnr {:.4} dB, mean ssim {:.6}",
        names.len(),
        result.mean_psnr_db,
        result.mean_ssim
    );
    Ok(())
}

pub fn synth(out: &Path, count: usize, val_count: usize, size: usize, channels: usize, seed: u64) -> Result<(), CliError> {
    if count == 0 || size == 0 || !(channels == 1 || channels == 3) {
        return Err(CliError::Argument(
            "count and size must be positive, channels 1 or 3".into(),
        ));
    }
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    let mut manifest = String::from("role = clean\n[train]\n");
    for (dir, n, first, prefix) in [("train", count, 0u64, "img"), ("val", val_count, 1 << 32, "val")] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(fs_err(&d))?;
        let names: Vec<String> = (0..n).map(|i| format!("{prefix}_{i:04}.{ext}")).collect();
        names.par_iter().enumerate().try_for_each(|(i, name)| {
            write(&synthetic_image(size, channels, seed, first + i as u64), &d.join(name))
        })?;
        if dir == "val" && n > 0 {
            manifest.push_str("[val]\n");
        }
        for name in names {
            manifest.push_str(&format!("{dir}/{name}\n"));
        }
    }
    let mpath = out.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(fs_err(&mpath))?;
    println!("wrote {count} training and {val_count} validation images; manifest {}", mpath.display());
    Ok(())
}
