//! Binary checkpoints of a model, optional gates, the generator state and the
//! digest of the config that produced them.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STRK"  u32 version  u64 record_count
//! record: u32 name_len  name  u8 dtype  u32 rank  u64 dims[rank]  data
//! ```
//!
//! `dtype` is 0 for f64, 1 for u64 and 2 for raw bytes. Model tensors come
//! first in canonical order, then gate vectors, then the trailing records
//! `meta.model_config` (JSON bytes), `meta.rng_state` and
//! `meta.config_digest`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GateSet, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STRK";
pub const FORMAT_VERSION: u32 = 1;

const F64: u8 = 0;
const U64: u8 = 1;
const BYTES: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub gates: Option<GateSet>,
    pub rng: Rng,
    /// Digest of the training-relevant config subset.
    pub config_digest: String,
}

enum Payload<'a> {
    F64(&'a [f64]),
    U64(&'a [u64]),
    Bytes(&'a [u8]),
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], payload: Payload<'_>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let tag = match payload {
        Payload::F64(_) => F64,
        Payload::U64(_) => U64,
        Payload::Bytes(_) => BYTES,
    };
    out.push(tag);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match payload {
        Payload::F64(xs) => xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U64(xs) => xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::Bytes(xs) => out.extend_from_slice(xs),
    }
}

struct Record {
    name: String,
    dtype: u8,
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl Record {
    fn f64s(&self) -> Result<Tensor> {
        if self.dtype != F64 {
            return Err(Error::Format(format!("`{}` is not an f64 record", self.name)));
        }
        let data = self
            .data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(self.dims.clone(), data)
    }

    fn u64s(&self) -> Result<Vec<u64>> {
        if self.dtype != U64 {
            return Err(Error::Format(format!("`{}` is not a u64 record", self.name)));
        }
        Ok(self
            .data
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn bytes(&self) -> Result<&[u8]> {
        if self.dtype != BYTES {
            return Err(Error::Format(format!("`{}` is not a byte record", self.name)));
        }
        Ok(&self.data)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let dtype = self.u8()?;
        let rank = self.u32()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?;
        let width = match dtype {
            F64 | U64 => 8,
            BYTES => 1,
            t => return Err(Error::Format(format!("unknown dtype tag {t} in `{name}`"))),
        };
        let size = numel
            .checked_mul(width)
            .ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?;
        let data = self.take(size)?.to_vec();
        Ok(Record {
            name,
            dtype,
            dims,
            data,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = Vec::new();
        let mut count = 0u64;
        for (name, t) in self.params.named_tensors() {
            put_record(&mut records, &name, t.shape(), Payload::F64(t.data()));
            count += 1;
        }
        if let Some(g) = &self.gates {
            for (l, xi) in g.xi.iter().enumerate() {
                put_record(&mut records, &format!("gates.{l}.xi"), &[xi.len()], Payload::F64(xi));
                count += 1;
            }
            for (l, nu) in g.nu.iter().enumerate() {
                put_record(&mut records, &format!("gates.{l}.nu"), &[nu.len()], Payload::F64(nu));
                count += 1;
            }
        }
        let config = serde_json::to_vec(&self.params.config)?;
        put_record(&mut records, "meta.model_config", &[config.len()], Payload::Bytes(&config));
        put_record(&mut records, "meta.rng_state", &[1], Payload::U64(&[self.rng.state()]));
        let digest = self.config_digest.as_bytes();
        put_record(&mut records, "meta.config_digest", &[digest.len()], Payload::Bytes(digest));
        count += 3;

        let mut out = Vec::with_capacity(records.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&records);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing STRK magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u64()?;
        let mut tensors = Vec::new();
        let mut xi = Vec::new();
        let mut nu = Vec::new();
        let (mut config, mut rng, mut digest) = (None, None, None);
        for _ in 0..count {
            let rec = r.record()?;
            match rec.name.as_str() {
                "meta.model_config" => {
                    config = Some(serde_json::from_slice::<ModelConfig>(rec.bytes()?)?)
                }
                "meta.rng_state" => match rec.u64s()?.as_slice() {
                    [s] => rng = Some(Rng::new(*s)),
                    _ => return Err(Error::Format("rng state must hold one word".into())),
                },
                "meta.config_digest" => {
                    digest = Some(
                        String::from_utf8(rec.bytes()?.to_vec())
                            .map_err(|_| Error::Format("config digest is not UTF-8".into()))?,
                    )
                }
                name if name.starts_with("gates.") => {
                    let v = rec.f64s()?.into_vec();
                    if name.ends_with(".xi") {
                        xi.push(v);
                    } else if name.ends_with(".nu") {
                        nu.push(v);
                    } else {
                        return Err(Error::Format(format!("unknown gate record `{name}`")));
                    }
                }
                _ => {
                    let t = rec.f64s()?;
                    tensors.push((rec.name, t));
                }
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        let config = config.ok_or_else(|| Error::Format("missing model config".into()))?;
        let params = ModelParams::from_named(config, &tensors)?;
        let gates = if xi.is_empty() && nu.is_empty() {
            None
        } else {
            let g = GateSet { xi, nu };
            if !g.matches(&params) {
                return Err(Error::Format("gate records do not match the model".into()));
            }
            Some(g)
        };
        Ok(Self {
            params,
            gates,
            rng: rng.ok_or_else(|| Error::Format("missing rng state".into()))?,
            config_digest: digest.ok_or_else(|| Error::Format("missing config digest".into()))?,
        })
    }

    /// SHA-256 of the serialized bytes.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Fails with a rewind error unless the checkpoint was written under a
    /// config with digest `expected`.
    pub fn check_digest(&self, expected: &str) -> Result<()> {
        if self.config_digest != expected {
            return Err(Error::Rewind(format!(
                "checkpoint config digest {} does not match {expected}",
                self.config_digest
            )));
        }
        Ok(())
    }
}
