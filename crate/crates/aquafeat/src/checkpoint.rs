//! Binary checkpoint persistence.
//!
//! Layout: magic `AQF+`, format version, the model configuration, then
//! every parameter as (name, shape, 32-bit little-endian data) in
//! canonical order. Saving a loaded checkpoint reproduces the byte stream
//! exactly.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::tensor::TensorError;

pub const MAGIC: [u8; 4] = *b"AQF+";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic: expected AQF+, found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("checkpoint has trailing bytes after the last parameter")]
    TrailingBytes,
    #[error("parameter mismatch: expected {expected}, found {found}")]
    ParamMismatch { expected: String, found: String },
    #[error("parameter {name}: expected {expected} values, found {found}")]
    SizeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(#[from] TensorError),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Serialize a model to the canonical byte stream.
pub fn checkpoint_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let c = &model.config;
    out.extend_from_slice(&(c.feature_width as u32).to_le_bytes());
    out.extend_from_slice(&(c.embed_width as u32).to_le_bytes());
    out.extend_from_slice(&(c.gfa_reduction as u32).to_le_bytes());
    out.extend_from_slice(&(c.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&c.leaky_slope.to_le_bytes());
    out.extend_from_slice(&c.residual_scale.to_le_bytes());
    out.push(model.enhancer_bypassed as u8);

    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let s = p.value.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Rebuild a model from checkpoint bytes, verifying names and shapes in
/// canonical order.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Model<f32>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config = ModelConfig {
        feature_width: r.u32("feature_width")? as usize,
        embed_width: r.u32("embed_width")? as usize,
        gfa_reduction: r.u32("gfa_reduction")? as usize,
        num_classes: r.u32("num_classes")? as usize,
        leaky_slope: r.f64("leaky_slope")?,
        residual_scale: r.f64("residual_scale")?,
    };
    let bypass = r.take(1, "bypass flag")?[0] != 0;
    let mut model: Model<f32> = Model::init(config, 0)?;
    model.enhancer_bypassed = bypass;

    let count = r.u32("parameter count")? as usize;
    {
        let mut params = model.params_mut();
        if count != params.len() {
            return Err(CheckpointError::ParamMismatch {
                expected: format!("{} parameters", params.len()),
                found: format!("{count} parameters"),
            });
        }
        for p in params.iter_mut() {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| {
                CheckpointError::ParamMismatch {
                    expected: p.name.clone(),
                    found: "<non-utf8 name>".into(),
                }
            })?;
            if name != p.name {
                return Err(CheckpointError::ParamMismatch {
                    expected: p.name.clone(),
                    found: name,
                });
            }
            let dims: Vec<usize> = (0..4)
                .map(|_| r.u32("shape").map(|v| v as usize))
                .collect::<Result<_, _>>()?;
            let s = p.value.shape();
            if dims != [s.n, s.c, s.h, s.w] {
                return Err(CheckpointError::SizeMismatch {
                    name: p.name.clone(),
                    expected: s.numel(),
                    found: dims.iter().product(),
                });
            }
            let raw = r.take(4 * s.numel(), "parameter data")?;
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(model)
}

/// Atomic write of the canonical byte stream.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(model);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|source| CheckpointError::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::ImageRGB;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 11).unwrap();
        let bytes = checkpoint_bytes(&model);
        let loaded = model_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&loaded), bytes);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 1).unwrap();
        let mut bytes = checkpoint_bytes(&model);
        bytes[0] = b'X';
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 1).unwrap();
        let bytes = checkpoint_bytes(&model);
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(
            model_from_bytes(cut),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 1).unwrap();
        let mut bytes = checkpoint_bytes(&model);
        bytes.push(0);
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(CheckpointError::TrailingBytes)
        ));
    }

    #[test]
    fn tampered_name_reports_the_field() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 1).unwrap();
        let mut bytes = checkpoint_bytes(&model);
        // first name starts after magic+version+config+flag+count
        let name_pos = 4 + 4 + 4 * 4 + 8 * 2 + 1 + 4 + 4;
        bytes[name_pos] = b'x';
        match model_from_bytes(&bytes) {
            Err(CheckpointError::ParamMismatch { expected, .. }) => {
                assert_eq!(expected, "ufen.entry.conv_w");
            }
            other => panic!("expected ParamMismatch, got {other:?}"),
        }
    }

    #[test]
    fn fresh_model_round_trip_preserves_identity_at_init() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fresh.ckpt");
        let model: Model<f32> = Model::init(ModelConfig::default(), 21).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let img = ImageRGB::from_fn(16, 12, |x, y| {
            [
                0.1 + 0.7 * (x as f32 / 16.0),
                0.2 + 0.5 * (y as f32 / 12.0),
                0.3,
            ]
        });
        let expected = crate::color::white_balance_to_median(&img);
        assert_eq!(loaded.enhance_frame(&img).unwrap(), expected);
    }
}
