//! The `.meld` weight file.
//!
//! ```text
//! "MELD"                       4 bytes
//! version                      u32 LE (= 1)
//! config length                u64 LE
//! config                       UTF-8 JSON
//! per tensor, in layer order:
//!     name length              u16 LE
//!     name                     UTF-8
//!     rank                     u8
//!     extents                  u32 LE each
//!     values                   f32 LE, row-major
//! CRC32 of all preceding bytes u32 LE
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ArchitectureConfig, LayerSpec, LayerWeights, ModelError, WeightBundle};
use crate::tensor::{BatchNorm, ConvParams, Tensor};

pub const MAGIC: [u8; 4] = *b"MELD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bad magic: not a MELD weight file")]
    BadMagic,
    #[error("unsupported weight file version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated stream: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: file says {stored:#010x}, contents hash to {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("embedded config is invalid: {0}")]
    Config(#[source] ModelError),
    #[error("tensor {name:?} has shape {actual:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("expected tensor {expected:?}, found {found:?}")]
    UnexpectedTensor { expected: String, found: String },
    #[error("config requires tensor {0:?}, file has no more tensors")]
    MissingTensor(String),
    #[error("non UTF-8 text in weight file at offset {0}")]
    Utf8(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Serializes a bundle to the `.meld` byte layout.
pub fn encode_weights(bundle: &WeightBundle) -> Vec<u8> {
    let config = serde_json::to_vec(bundle.config()).expect("config serializes");
    let mut out = Vec::with_capacity(64 + config.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    for t in bundle.named_tensors() {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        if n > self.remaining() {
            return Err(BundleError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BundleError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<&'a str, BundleError> {
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| BundleError::Utf8(at))
    }
}

struct RawTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn read_tensor(r: &mut Reader<'_>) -> Result<RawTensor, BundleError> {
    let name_len = r.u16()? as usize;
    let name = r.text(name_len)?.to_string();
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or(BundleError::Truncated {
            offset: r.pos,
            needed: usize::MAX,
        })?;
    let raw = r.take(count)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(RawTensor { name, dims, data })
}

/// Parses a `.meld` byte stream. Structure is read first (so a short file
/// reports truncation), then the checksum is verified, then the tensors are
/// matched against the embedded config.
pub fn decode_weights(bytes: &[u8]) -> Result<WeightBundle, BundleError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            BundleError::Truncated {
                offset: bytes.len(),
                needed: MAGIC.len() - bytes.len(),
            }
        } else {
            BundleError::BadMagic
        });
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(BundleError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let config_len = usize::try_from(r.u64()?).unwrap_or(usize::MAX);
    let config_text = r.take(config_len)?;
    let mut raw = Vec::new();
    while r.remaining() != 4 {
        if r.remaining() < 4 {
            return Err(BundleError::Truncated {
                offset: r.pos,
                needed: 4 - r.remaining(),
            });
        }
        raw.push(read_tensor(&mut r)?);
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(BundleError::ChecksumMismatch { stored, computed });
    }

    let config_text = std::str::from_utf8(config_text).map_err(|_| BundleError::Utf8(16))?;
    let config = ArchitectureConfig::from_json(config_text).map_err(BundleError::Config)?;
    let template = WeightBundle::zeros(config.clone()).map_err(BundleError::Config)?;
    let mut raw = raw.into_iter();
    let mut next = |name: String, dims: Vec<usize>| -> Result<Vec<f32>, BundleError> {
        let t = raw.next().ok_or_else(|| BundleError::MissingTensor(name.clone()))?;
        if t.name != name {
            return Err(BundleError::UnexpectedTensor {
                expected: name,
                found: t.name,
            });
        }
        if t.dims != dims {
            return Err(BundleError::ShapeMismatch {
                name,
                expected: dims,
                actual: t.dims,
            });
        }
        Ok(t.data)
    };
    let mut layers = Vec::with_capacity(config.layers.len());
    for (i, (spec, w)) in config.layers.iter().zip(template.layers()).enumerate() {
        layers.push(match (spec, w) {
            (LayerSpec::Conv(c), LayerWeights::Conv(p)) => {
                let kdims = p.kernel.dims().to_vec();
                let kernel = next(format!("layers.{i}.kernel"), kdims.clone())?;
                let bias = if c.bias {
                    next(format!("layers.{i}.bias"), vec![c.out_ch])?
                } else {
                    vec![0.0; c.out_ch]
                };
                LayerWeights::Conv(ConvParams {
                    kernel: Tensor::new(kdims, kernel).expect("dims checked"),
                    bias,
                    dilation: c.dilation,
                })
            }
            (_, LayerWeights::BatchNorm(bn)) => {
                let n = bn.channels();
                let mut field = |suffix: &str| next(format!("layers.{i}.{suffix}"), vec![n]);
                LayerWeights::BatchNorm(BatchNorm {
                    gamma: field("gamma")?,
                    beta: field("beta")?,
                    running_mean: field("running_mean")?,
                    running_var: field("running_var")?,
                    ..bn.clone()
                })
            }
            _ => LayerWeights::Stateless,
        });
    }
    if let Some(extra) = raw.next() {
        return Err(BundleError::UnexpectedTensor {
            expected: "end of tensors".into(),
            found: extra.name,
        });
    }
    WeightBundle::new(config, layers).map_err(BundleError::Config)
}

pub fn save_weights(bundle: &WeightBundle, path: &Path) -> Result<(), BundleError> {
    std::fs::write(path, encode_weights(bundle)).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(path: &Path) -> Result<WeightBundle, BundleError> {
    let bytes = std::fs::read(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_weights(&bytes)
}
