//! Versioned tensor container.
//!
//! Layout (little-endian): magic `A2KCKPT1`, `u32` version, `u32` metadata
//! length, JSON metadata, `u32` tensor count, then per tensor: `u32` name
//! length, UTF-8 name, `u32` rank, `u32` dims, `f64` values.

use std::path::Path;

use super::params::{ModelConfig, ModelParams, Network, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"A2KCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "checkpoint truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not an A2KCKPT1 checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint tensors"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

impl ModelParams {
    /// Tensors named `<G|E|D>/<param>`.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        Network::ALL
            .iter()
            .flat_map(|&net| {
                self.network(net)
                    .iter()
                    .map(move |(n, t)| (format!("{}/{n}", net.tag()), t.clone()))
            })
            .collect()
    }

    /// Rebuilds parameters from `ckpt`, checking names and shapes against a
    /// fresh layout for `config`.
    pub fn from_checkpoint(config: &ModelConfig, ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let mut params = ModelParams::init(config, 0)?;
        for net in Network::ALL {
            let template = params.network(net);
            let mut entries = Vec::with_capacity(template.len());
            for (name, t) in template.iter() {
                let key = format!("{}/{name}", net.tag());
                let stored = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::format(path, format!("missing tensor {key}")))?;
                if stored.shape() != t.shape() {
                    return Err(Error::format(
                        path,
                        format!("tensor {key} has shape {:?}, expected {:?}", stored.shape(), t.shape()),
                    ));
                }
                entries.push((name.to_string(), stored.clone()));
            }
            *params.network_mut(net) = ParamSet::from_entries(entries);
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let cfg = ModelConfig::gradcheck();
        let params = ModelParams::init(&cfg, 11).unwrap();
        let ckpt = Checkpoint {
            meta: serde_json::json!({ "config": cfg }),
            tensors: params.to_tensors(),
        };
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode(), bytes);
        let restored = ModelParams::from_checkpoint(&cfg, &back, Path::new("mem")).unwrap();
        assert_eq!(restored, params);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let cfg = ModelConfig::gradcheck();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let bytes = Checkpoint {
            meta: serde_json::json!({}),
            tensors: params.to_tensors(),
        }
        .encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(Checkpoint::decode(b"garbage!", Path::new("x")).is_err());

        let wrong = Checkpoint {
            meta: serde_json::json!({}),
            tensors: ModelParams::init(&ModelConfig::toy(), 1).unwrap().to_tensors(),
        };
        assert!(ModelParams::from_checkpoint(&cfg, &wrong, Path::new("x")).is_err());
    }
}
