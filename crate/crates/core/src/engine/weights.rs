//! Binary weights file.
//!
//! Layout, all little-endian: magic `STLPDW01`, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, `rank` u32 extents
//! and the row-major f32 data. A trailing u32 holds the CRC-32 of every
//! preceding byte.

use std::path::Path;

use super::EngineError;
use crate::autodiff::Tensor;
use crate::net::{Backbone, Model, NetConfig};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"STLPDW01";

fn err(msg: impl Into<String>) -> EngineError {
    EngineError::Weights(msg.into())
}

pub fn encode_weights<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, EngineError> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = WEIGHTS_MAGIC.to_vec();
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| err(format!("name `{name}` is too long")))?;
        out.extend(len.to_le_bytes());
        out.extend(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| err(format!("`{name}` has too many dimensions")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| err(format!("`{name}` extent {d} overflows u32")))?;
            out.extend(d.to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| err(format!("truncated stream at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, EngineError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, EngineError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, EngineError> {
    if bytes.len() < WEIGHTS_MAGIC.len() || &bytes[..WEIGHTS_MAGIC.len()] != WEIGHTS_MAGIC {
        return Err(err("bad magic, expected STLPDW01"));
    }
    if bytes.len() < WEIGHTS_MAGIC.len() + 8 {
        return Err(err("truncated stream"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(err(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader {
        bytes: body,
        pos: WEIGHTS_MAGIC.len(),
    };
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| err("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| err(format!("`{name}` is too large")))?;
        let data = r
            .take(numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| err(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(err(format!("{} trailing bytes after the last tensor", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<(), EngineError> {
    let bytes = encode_weights(model.params().iter().map(|p| (p.name.as_str(), &p.tensor)))?;
    std::fs::write(path, bytes).map_err(|e| EngineError::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>, EngineError> {
    let bytes = std::fs::read(path).map_err(|e| EngineError::io(path, e))?;
    decode_weights(&bytes)
}

/// Recovers the architecture from tensor names and shapes. The input size
/// is not stored and must be supplied.
pub fn infer_net_config(tensors: &[(String, Tensor)], input_size: usize) -> Result<NetConfig, EngineError> {
    let shape = |name: &str| -> Result<&[usize], EngineError> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape())
            .ok_or_else(|| err(format!("missing tensor `{name}`")))
    };
    let has = |prefix: &str| tensors.iter().any(|(n, _)| n.starts_with(prefix));
    let backbone = if has("backbone.stage1.dw.") {
        Backbone::Lightweight
    } else {
        Backbone::Residual
    };
    let out_conv = match backbone {
        Backbone::Residual => "conv1",
        Backbone::Lightweight => "pw",
    };
    let mut stage_channels = [0; 4];
    for (i, c) in stage_channels.iter_mut().enumerate() {
        *c = shape(&format!("backbone.stage{}.{out_conv}.weight", i + 1))?[0];
    }
    Ok(NetConfig {
        backbone,
        attention: has("attention."),
        stage_channels,
        fpn_dim: shape("fpn.lateral3.weight")?[0],
        anchors_per_cell: shape("head.score.weight")?[0],
        input_size,
    })
}

/// Loads a model, inferring its architecture from the stored tensors.
pub fn load_weights(path: &Path, input_size: usize) -> Result<Model, EngineError> {
    let tensors = read_weights(path)?;
    let config = infer_net_config(&tensors, input_size)?;
    Ok(Model::from_tensors(&config, tensors)?)
}
