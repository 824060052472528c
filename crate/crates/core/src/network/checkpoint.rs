//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "N2CK"                    magic
//! u16                       format version
//! u16                       number of config fields (7)
//! u32 × 7                   in_channels, out_channels, depth, base_channels,
//!                           kernel_size, refine_iters, refine_alpha (f32 bits)
//! u32                       parameter count
//! per parameter:
//!   u16 + bytes             name (UTF-8)
//!   u8  + u32 × rank        shape
//!   f32 × numel             values
//! u32                       CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{Network, NetworkError, Parameters, UNet, UNetConfig};
use crate::inference::RefineConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"N2CK";
pub const CHECKPOINT_VERSION: u16 = 1;
const CONFIG_FIELDS: u16 = 7;
const HEADER_LEN: usize = 4 + 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint config block has {0} fields, expected 7")]
    ConfigFields(u16),
    #[error("checkpoint parameter `{name}` has shape {found:?}, architecture expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint parameter {index} is `{found}`, architecture expects `{expected}`")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("checkpoint holds {found} parameters, architecture expects {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("checkpoint has {0} bytes after the checksum")]
    TrailingBytes(usize),
    #[error("checkpoint architecture: {0}")]
    Network(#[from] NetworkError),
    #[error("checkpoint parameter name is not UTF-8")]
    Name,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub refine: RefineConfig,
    pub params: Parameters<f32>,
}

impl Checkpoint {
    pub fn into_network(self) -> Result<Network, CheckpointError> {
        Ok(Network::new(UNet::new(self.config)?, self.params)?)
    }
}

pub fn encode_checkpoint(params: &Parameters<f32>, config: &UNetConfig, refine: &RefineConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.scalar_count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&CONFIG_FIELDS.to_le_bytes());
    for v in [
        config.in_channels as u32,
        config.out_channels as u32,
        config.depth as u32,
        config.base_channels as u32,
        config.kernel_size as u32,
        refine.num_iters as u32,
        refine.alpha.to_bits(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses everything between the version and the checksum.
fn parse_body(body: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader {
        buf: body,
        pos: HEADER_LEN,
    };
    let fields = r.u16()?;
    if fields != CONFIG_FIELDS {
        return Err(CheckpointError::ConfigFields(fields));
    }
    let mut f = [0u32; 7];
    for v in &mut f {
        *v = r.u32()?;
    }
    let config = UNetConfig {
        in_channels: f[0] as usize,
        out_channels: f[1] as usize,
        depth: f[2] as usize,
        base_channels: f[3] as usize,
        kernel_size: f[4] as usize,
    };
    let refine = RefineConfig {
        num_iters: f[5] as usize,
        alpha: f32::from_bits(f[6]),
    };
    let unet = UNet::new(config)?;
    let expected = unet.param_shapes();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(CheckpointError::ParamCount {
            expected: expected.len(),
            found: count,
        });
    }
    let mut named = Vec::with_capacity(count);
    for (index, (exp_name, exp_shape)) in expected.into_iter().enumerate() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Name)?
            .to_string();
        if name != exp_name {
            return Err(CheckpointError::NameMismatch {
                index,
                expected: exp_name,
                found: name,
            });
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != exp_shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: exp_shape,
                found: shape,
            });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, Tensor::new(shape, data).expect("length from shape")));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::TrailingBytes(body.len() - r.pos));
    }
    Ok(Checkpoint {
        config,
        refine,
        params: Parameters::new(named).map_err(CheckpointError::Network)?,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated { offset: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(CheckpointError::Truncated { offset: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        // A short read shows up as a checksum failure; report it as such
        // when the structure itself runs out of bytes.
        return match parse_body(body) {
            Err(e @ CheckpointError::Truncated { .. }) => Err(e),
            _ => Err(CheckpointError::CrcMismatch { stored, computed }),
        };
    }
    parse_body(body)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &Parameters<f32>,
    config: &UNetConfig,
    refine: &RefineConfig,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params, config, refine))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
