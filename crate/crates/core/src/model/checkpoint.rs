//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"DPFIMCK\0"
//! version      u32       currently 1
//! header_len   u64       byte length of the JSON header
//! header       JSON      CheckpointHeader
//! base         f64 × header.base_len
//! adapters     f64 × header.adapters_len
//! adam_m       f64 × header.optimizer.len   (only if optimizer present)
//! adam_v       f64 × header.optimizer.len   (only if optimizer present)
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a save/load roundtrip is exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoraConfig, ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"DPFIMCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub step: u64,
    pub rngs: BTreeMap<String, RngState>,
    pub optimizer: Option<OptimizerSnapshot>,
    /// Free-form run metadata (mode, accountant settings, ...).
    pub meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    t: u64,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: ModelConfig,
    lora: LoraConfig,
    step: u64,
    rngs: BTreeMap<String, RngState>,
    base_len: usize,
    adapters_len: usize,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParameterSet) -> Self {
        Checkpoint {
            params,
            step: 0,
            rngs: BTreeMap::new(),
            optimizer: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            model: self.params.model,
            lora: self.params.lora,
            step: self.step,
            rngs: self.rngs.clone(),
            base_len: self.params.base.len(),
            adapters_len: self.params.adapters.len(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                t: o.t,
                len: o.m.len(),
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats = self.params.base.len()
            + self.params.adapters.len()
            + self.optimizer.as_ref().map_or(0, |o| 2 * o.m.len());
        let mut out = Vec::with_capacity(20 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&self.params.base);
        put(&self.params.adapters);
        if let Some(o) = &self.optimizer {
            if o.v.len() != o.m.len() {
                return Err(Error::Checkpoint("optimizer moment lengths differ".into()));
            }
            put(&o.m);
            put(&o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if hlen > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if r.len() < 8 * n {
                return Err(Error::Checkpoint("truncated weights".into()));
            }
            let xs = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[8 * n..];
            Ok(xs)
        };
        let base = take(header.base_len)?;
        let adapters = take(header.adapters_len)?;
        let optimizer = match &header.optimizer {
            Some(o) => Some(OptimizerSnapshot {
                t: o.t,
                m: take(o.len)?,
                v: take(o.len)?,
            }),
            None => None,
        };
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let params = ParameterSet {
            model: header.model,
            lora: header.lora,
            base,
            adapters,
        };
        if params.base.len() != params.base_layout().len || params.adapters.len() != params.adapter_layout().len {
            return Err(Error::Checkpoint("weight counts do not match configs".into()));
        }
        Ok(Checkpoint {
            params,
            step: header.step,
            rngs: header.rngs,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::rng::{substream, STREAM_NOISE};

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 32,
            ..Default::default()
        };
        let mut params = init_model(&cfg, &LoraConfig { rank: 4, alpha: 8.0 }, 3).unwrap();
        params.adapters[5] = -0.0;
        params.base[0] = f64::MIN_POSITIVE / 3.0;
        let n = params.adapters.len();
        let mut ck = Checkpoint::new(params);
        ck.step = 42;
        ck.rngs.insert("noise".into(), RngState::capture(&substream(1, STREAM_NOISE)));
        ck.optimizer = Some(OptimizerSnapshot {
            t: 42,
            m: vec![0.25; n],
            v: vec![1e-300; n],
        });
        ck.meta = serde_json::json!({"mode": "dp"});
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params.adapters[5].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.step, 42);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        assert!(Checkpoint::from_bytes(b"DPFIMCK\0\x02\0\0\0").is_err());
    }
}
