//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "RGTRCKPT" | version | config length | config text (UTF-8)
//! tensor count | per tensor: name length | name | rank | dims... | f32 payload
//! ```
//!
//! The configuration echo uses the `key = value` form of the config module.

use std::fs;
use std::path::Path;

use crate::config::{model_config_text, parse_model_config};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::xencoder::ModelConfig;

pub const MAGIC: &[u8; 8] = b"RGTRCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    let text = model_config_text(model.config());
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    let params = model.params();
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 2)?;
        put_u32(&mut out, t.rows())?;
        put_u32(&mut out, t.cols())?;
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let text = r.string()?;
    let cfg = parse_model_config(&text, ModelConfig::default()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store
            .insert(name, Tensor::new(rows, cols, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_parts(cfg, store)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xencoder::DecoderKind;

    fn model() -> Model<f32> {
        let cfg = ModelConfig {
            d: 12,
            heads: 3,
            layers: 1,
            ffn_hidden: 8,
            head_hidden: 6,
            feature_dim: 10,
            backbone_hidden: 8,
            decoder: DecoderKind::Weighted,
            posenc_scale: 1.7,
            ..ModelConfig::desk()
        };
        Model::init(cfg, 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(from_bytes(&version).is_err());
    }
}
