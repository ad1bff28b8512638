//! Binary checkpoint format.
//!
//! ```text
//! b"SARC" | u32 version | u32 len | len bytes of UTF-8 TOML
//! then until EOF, per tensor:
//! u32 name_len | name | u32 rank | rank × u32 extents | f32 values (LE)
//! ```
//!
//! The TOML block holds a `[model]` table (the [`SarcNetConfig`]) and an
//! optional `[meta]` table. Buffers are stored next to the weights and told
//! apart by their `.running_mean` / `.running_var` suffix.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result, SarcNetConfig, SarcNetParams};
use crate::features::{GlcmConfig, ScalerParams};
use crate::tensor::{AdamConfig, Tensor};

pub const MAGIC: &[u8; 4] = b"SARC";
pub const FORMAT_VERSION: u32 = 1;

/// Training provenance carried alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub val_spearman: Option<f64>,
    pub adam: Option<AdamConfig>,
    /// Description of the image normalization applied before the model.
    pub normalization: Option<String>,
    pub pad_square: bool,
    pub scaler: Option<ScalerParams>,
    /// Texture settings used to extract the scaled features.
    pub glcm: Option<GlcmConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SarcNetParams<f32>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: SarcNetConfig,
    #[serde(default)]
    meta: CheckpointMeta,
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| corrupt("value exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Encodes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        model: ckpt.params.config.clone(),
        meta: ckpt.meta.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    for (name, t) in ckpt.params.weights.iter().chain(&ckpt.params.buffers) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &e in t.shape() {
            put_u32(&mut out, e)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decodes and validates a checkpoint. Nothing is returned unless every
/// tensor named by the config is present with the right shape.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4).map_err(|_| corrupt("file too short"))? != MAGIC {
        return Err(corrupt("bad magic, not a SARC checkpoint"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(corrupt(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = c.u32()?;
    let text = std::str::from_utf8(c.take(len)?).map_err(|e| corrupt(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    header.model.validate()?;

    let mut weights = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    while !c.done() {
        let n = c.u32()?;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|e| corrupt(e.to_string()))?
            .to_string();
        let rank = c.u32()?;
        if rank == 0 || rank > 8 {
            return Err(corrupt(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(format!("tensor `{name}` too large")))?;
        let data = c
            .take(count)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
        let map = if is_buffer(&name) { &mut buffers } else { &mut weights };
        if map.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    let params = SarcNetParams {
        config: header.model,
        weights,
        buffers,
    };
    params.validate_layout()?;
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter values"));
    }
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

/// Writes to a sibling temp file then renames, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Protocol;

    fn sample() -> Checkpoint {
        let cfg = SarcNetConfig {
            input_size: 32,
            stage_widths: [4, 4, 8, 8],
            embed_dim: 8,
            feature_hidden: [6, 6],
            head_widths: [8, 4, 4, 1],
            protocol: Protocol::P1,
            seed: 3,
        };
        let mut params = SarcNetParams::<f32>::init(&cfg).unwrap();
        params.buffers.values_mut().next().unwrap().data_mut()[0] = 0.123;
        Checkpoint {
            params,
            meta: CheckpointMeta {
                epoch: Some(7),
                val_spearman: Some(0.81),
                adam: Some(AdamConfig::default()),
                normalization: Some("zscore".into()),
                pad_square: true,
                scaler: None,
                glcm: Some(GlcmConfig::default()),
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sarc");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for (k, t) in &ckpt.params.weights {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(&back.params.weights[k]));
        }
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode(&sample()).unwrap();
        let step = (bytes.len() / 97).max(1);
        for cut in (0..bytes.len()).step_by(step) {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.sarc")),
            Err(ModelError::Io(_))
        ));
    }
}
