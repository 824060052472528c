//! 8-bit image files: binary PGM/PPM (`P5`/`P6`) and PNG.
//!
//! Reading maps stored values `v` to `v / maxval`; writing stores
//! `round(255·v)` after clamping to `[0, 1]`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::image::{Image, ImageError, PixelMask};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a PGM/PPM or PNG file (leading bytes {0:?})")]
    BadMagic(Vec<u8>),
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("truncated image: expected {expected} raster bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed PNM header: {0}")]
    Header(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pnm,
    Png,
}

impl ImageFormat {
    /// `.pgm`/`.ppm`/`.pnm` or `.png`, case-insensitive.
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" | "ppm" | "pnm" => Some(Self::Pnm),
            "png" => Some(Self::Png),
            _ => None,
        }
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit samples, `HWC` order.
fn to_interleaved(image: &Image) -> Vec<u8> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(image.get(ch, y, x)));
            }
        }
    }
    out
}

fn from_interleaved(h: usize, w: usize, c: usize, bytes: &[u8], maxval: f32) -> Result<Image, ImageError> {
    Image::from_fn(h, w, c, |ch, y, x| bytes[(y * w + x) * c + ch] as f32 / maxval)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageIoError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageIoError::Header(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| ImageIoError::Header(format!("{what} out of range")))
    }
}

/// Parses a binary `P5` (gray) or `P6` (RGB) file with `maxval ≤ 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageIoError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some([b'P', b'1'..=b'4']) => {
            return Err(ImageIoError::Unsupported("plain-text or bitmap PNM".into()));
        }
        _ => return Err(ImageIoError::BadMagic(bytes.iter().take(4).copied().collect())),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval == 0 {
        return Err(ImageIoError::Header("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(ImageIoError::Unsupported(format!("PNM maxval {maxval}; only 8-bit files are read")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(ImageIoError::Header("expected whitespace after maxval".into())),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| ImageIoError::Header("dimensions overflow".into()))?;
    let raster = &bytes[cur.pos..];
    if raster.len() < expected {
        return Err(ImageIoError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    Ok(from_interleaved(height, width, channels, raster, maxval as f32)?)
}

/// `P5` for one channel, `P6` for three.
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(to_interleaved(image));
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageIoError> {
    let png_err = |e: png::DecodingError| ImageIoError::Png(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(ImageIoError::Unsupported(format!("{depth:?}-bit PNG")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageIoError::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.line_size;
    let (src_c, c) = match color {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(ImageIoError::Unsupported(format!("PNG color type {other:?}"))),
    };
    Ok(Image::from_fn(h, w, c, |ch, y, x| buf[y * stride + x * src_c + ch] as f32 / 255.0)?)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>, ImageIoError> {
    let png_err = |e: png::EncodingError| ImageIoError::Png(e.to_string());
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(if image.channels() == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&to_interleaved(image)).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(out)
}

/// Detects the format from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageIoError> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.first() == Some(&b'P') {
        decode_pnm(bytes)
    } else {
        Err(ImageIoError::BadMagic(bytes.iter().take(4).copied().collect()))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageIoError + '_ {
    move |source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image, ImageIoError> {
    let path = path.as_ref();
    decode_image(&fs::read(path).map_err(io_err(path))?)
}

/// Format follows the file extension.
pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path) {
        Some(ImageFormat::Pnm) => encode_pnm(image),
        Some(ImageFormat::Png) => encode_png(image)?,
        None => {
            return Err(ImageIoError::Unsupported(format!(
                "cannot infer format from `{}` (use .pgm, .ppm or .png)",
                path.display()
            )))
        }
    };
    fs::write(path, bytes).map_err(io_err(path))
}

/// Masks are stored as PGM with 255 for observed pixels.
pub fn write_mask(mask: &PixelMask, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    write_image(&mask.to_image(), path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<PixelMask, ImageIoError> {
    let img = read_image(path)?;
    Ok(PixelMask::observed(&img))
}
