//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CODA" | version u32 | precision u32 (32 or 64)
//! config_len u32 | run config as UTF-8 TOML
//! has_adam u8 | adam_step u64
//! tensor_count u32
//! per tensor: name_len u32 | name | rank u32 | dims u64 * rank | data
//! ```
//!
//! Tensor data is stored at the precision named in the header. Layer tensors
//! are `layer.{i}.b`, `layer.{i}.a`, `layer.{i}.bias`; optimiser moments are
//! `adam.m.{j}` and `adam.v.{j}` in parameter order.

use std::path::Path;

use super::{AdamState, RunConfig};
use crate::dau::DauConvLayer;
use crate::error::{Error, Result};
use crate::network::CodaNet;
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CODA";

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Scalar = f32> {
    pub config: RunConfig,
    pub net: CodaNet<S>,
    pub adam: Option<AdamState<S>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialises a checkpoint at precision `S`.
pub fn write_checkpoint<S: Scalar>(ck: &Checkpoint<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, S::BITS);
    let mut config = ck.config.clone();
    config.net = ck.net.config().clone();
    let text = config.to_toml();
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    out.push(ck.adam.is_some() as u8);
    out.extend_from_slice(&ck.adam.as_ref().map_or(0, |a| a.step).to_le_bytes());
    let mut tensors: Vec<(String, &Tensor<S>)> = Vec::new();
    for (i, l) in ck.net.layers().iter().enumerate() {
        for (suffix, t) in ["b", "a", "bias"].iter().zip(l.params()) {
            tensors.push((format!("layer.{i}.{suffix}"), t));
        }
    }
    if let Some(adam) = &ck.adam {
        for (j, t) in adam.m.iter().enumerate() {
            tensors.push((format!("adam.m.{j}"), t));
        }
        for (j, t) in adam.v.iter().enumerate() {
            tensors.push((format!("adam.v.{j}"), t));
        }
    }
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor<S: Scalar>(&mut self, bits: u32) -> Result<(String, Tensor<S>)> {
        let len = self.u32("tensor name length")? as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(self.err(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor dims")? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let width = bits as usize / 8;
        let bytes = count
            .and_then(|c| c.checked_mul(width))
            .ok_or_else(|| self.err(format!("tensor {name} is too large")))?;
        let raw = self.take(bytes, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                if bits == 32 {
                    S::of(f32::read_le(c) as f64)
                } else {
                    S::of(f64::read_le(c))
                }
            })
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

fn read_header(r: &mut Reader) -> Result<u32> {
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported format version {version}"),
        });
    }
    let bits = r.u32("precision")?;
    if bits != 32 && bits != 64 {
        return Err(Error::Format {
            offset: 8,
            msg: format!("precision must be 32 or 64, found {bits}"),
        });
    }
    Ok(bits)
}

/// Precision (32 or 64) a checkpoint was written at, from its header alone.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<u32> {
    read_header(&mut Reader { bytes, pos: 0 })
}

/// Parses a checkpoint, converting tensors to precision `S` if the file
/// was written at the other one.
pub fn read_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut r = Reader { bytes, pos: 0 };
    let bits = read_header(&mut r)?;
    let len = r.u32("config length")? as usize;
    let at = r.pos as u64;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Format {
        offset: at,
        msg: "config is not UTF-8".into(),
    })?;
    let config = RunConfig::from_toml(text).map_err(|e| Error::Format {
        offset: at,
        msg: format!("bad config block: {e}"),
    })?;
    let has_adam = r.take(1, "optimiser flag")?[0] != 0;
    let step = r.u64("optimiser step")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        tensors.push((r.pos, r.tensor::<S>(bits)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let specs = config.net.layer_specs()?;
    let mut it = tensors.into_iter();
    let mut expect = |name: String| -> Result<Tensor<S>> {
        match it.next() {
            Some((_, (n, t))) if n == name => Ok(t),
            Some((at, (n, _))) => Err(Error::Format {
                offset: at as u64,
                msg: format!("expected tensor {name}, found {n}"),
            }),
            None => Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("missing tensor {name}"),
            }),
        }
    };
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let b = expect(format!("layer.{i}.b"))?;
        let a = expect(format!("layer.{i}.a"))?;
        let bias = expect(format!("layer.{i}.bias"))?;
        layers.push(DauConvLayer::from_parts(*spec, b, a, bias).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("layer {i}: {e}"),
        })?);
    }
    let net = CodaNet::from_layers(config.net.clone(), layers)?;
    let adam = if has_adam {
        let n = 3 * specs.len();
        let m = (0..n)
            .map(|j| expect(format!("adam.m.{j}")))
            .collect::<Result<Vec<_>>>()?;
        let v = (0..n)
            .map(|j| expect(format!("adam.v.{j}")))
            .collect::<Result<Vec<_>>>()?;
        let mut adam = AdamState::for_net(&net);
        for (have, want) in m.iter().chain(&v).zip(adam.m.iter().chain(&adam.v)) {
            if have.shape() != want.shape() {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!(
                        "optimiser moment shape {:?} does not match {:?}",
                        have.shape(),
                        want.shape()
                    ),
                });
            }
        }
        adam.m = m;
        adam.v = v;
        adam.step = step;
        Some(adam)
    } else {
        None
    };
    if let Some((at, (name, _))) = it.next() {
        return Err(Error::Format {
            offset: at as u64,
            msg: format!("unexpected tensor {name}"),
        });
    }
    Ok(Checkpoint { config, net, adam })
}

pub fn save_checkpoint<S: Scalar>(ck: &Checkpoint<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    let path = path.as_ref();
    read_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
