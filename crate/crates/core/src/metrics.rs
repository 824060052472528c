//! PSNR and windowed SSIM, plus report aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("dynamic range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("invalid SSIM parameters: {0}")]
    Params(&'static str),
    #[error("{predictions} predictions but {references} references")]
    LengthMismatch { predictions: usize, references: usize },
}

fn dims(im: &Image) -> (usize, usize, usize) {
    (im.height(), im.width(), im.channels())
}

fn check_shapes(x: &Image, y: &Image) -> Result<(), MetricsError> {
    if x.same_dims(y) {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(dims(x), dims(y)))
    }
}

pub fn mse(x: &Image, y: &Image) -> Result<f64, MetricsError> {
    check_shapes(x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / x.data().len() as f64)
}

/// `10·log10(R² / mse)`, capped at [`PSNR_CAP_DB`] for a zero error.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(x: &Image, y: &Image, peak: f64) -> Result<f64, MetricsError> {
    if !(peak > 0.0) {
        return Err(MetricsError::NonPositiveRange(peak));
    }
    Ok(psnr_from_mse(mse(x, y)?, peak))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    /// Side of the square Gaussian window.
    pub window_size: usize,
    pub sigma: f64,
    /// Intensity range `R`, also used as the PSNR peak in reports.
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            window_size: 11,
            sigma: 1.5,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    fn validate(&self) -> Result<(), MetricsError> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(MetricsError::Params("c1 and c2 must be positive"));
        }
        if self.window_size == 0 || !(self.sigma > 0.0) {
            return Err(MetricsError::Params("window size and sigma must be positive"));
        }
        if !(self.dynamic_range > 0.0) {
            return Err(MetricsError::NonPositiveRange(self.dynamic_range));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let centre = (self.window_size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - centre;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Separable "valid" filtering of a `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
    let taps = p.taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);
    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + p.c1) * (2.0 * cov + p.c2);
        let den = (mx * mx + my * my + p.c1) * (var_x + var_y + p.c2);
        total += num / den;
    }
    total / n as f64
}

/// Mean SSIM over all window positions fully inside the image, averaged over
/// channels.
pub fn ssim(x: &Image, y: &Image, params: &SsimParams) -> Result<f64, MetricsError> {
    check_shapes(x, y)?;
    params.validate()?;
    let (h, w) = (x.height(), x.width());
    if h < params.window_size || w < params.window_size {
        return Err(MetricsError::TooSmall {
            height: h,
            width: w,
            window: params.window_size,
        });
    }
    let plane = h * w;
    let mut acc = 0.0;
    for c in 0..x.channels() {
        let px: Vec<f64> = x.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let py: Vec<f64> = y.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        acc += ssim_plane(&px, &py, h, w, params);
    }
    Ok(acc / x.channels() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

/// Sum accumulated in ascending order, so the mean does not depend on row
/// order.
fn order_free_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().sum::<f64>() / n
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Self {
        let mean_psnr_db = order_free_mean(rows.iter().map(|r| r.psnr_db).collect());
        let mean_ssim = order_free_mean(rows.iter().map(|r| r.ssim).collect());
        Self {
            rows,
            mean_psnr_db,
            mean_ssim,
        }
    }

    fn mean_row(&self) -> MetricsRow {
        MetricsRow {
            id: "mean".into(),
            psnr_db: self.mean_psnr_db,
            ssim: self.mean_ssim,
        }
    }

    /// `id,psnr_db,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean_row())) {
            writeln!(s, "{},{},{}", r.id, r.psnr_db, r.ssim).expect("writing to a String");
        }
        s
    }

    /// One JSON object per row, the `mean` row last.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in self.rows.iter().chain(std::iter::once(&self.mean_row())) {
            s.push_str(&serde_json::to_string(r).expect("row serializes"));
            s.push('\n');
        }
        s
    }
}

/// PSNR/SSIM of each aligned `(prediction, reference)` pair.
pub fn evaluate_pairs<S: AsRef<str>>(
    ids: &[S],
    predictions: &[Image],
    references: &[Image],
    params: &SsimParams,
) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != references.len() || ids.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    let rows = ids
        .iter()
        .zip(predictions.iter().zip(references))
        .map(|(id, (p, r))| {
            Ok(MetricsRow {
                id: id.as_ref().to_string(),
                psnr_db: psnr(p, r, params.dynamic_range)?,
                ssim: ssim(p, r, params)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(MetricsReport::from_rows(rows))
}
