//! Binary checkpoints.
//!
//! Layout: `"BPPC"`, `u32` LE version, `u64` LE header length, a UTF-8 JSON
//! header, then every tensor as contiguous `f32` LE values in directory order.
//! Tensor offsets are relative to the start of the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::bpp::{Bpp, BppConfig, BppParams};
use crate::error::{Error, Result};
use crate::image_io::write_atomic;
use crate::tensor::{Shape, Tensor};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"BPPC";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: [usize; 4],
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: BppConfig,
    step: u64,
    seed: u64,
    adam_t: u64,
    tensors: Vec<Entry>,
}

/// Network parameters plus optimizer and sampler state.
///
/// The sampler's random stream is keyed by `(seed, step)`, so the pair is
/// the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BppConfig,
    pub step: u64,
    pub seed: u64,
    pub adam_t: u64,
    /// Parameters in layout order, then `adam.m.<name>` and `adam.v.<name>`
    /// when optimizer state is present.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn new<T: Scalar>(net: &Bpp<T>, step: u64, seed: u64, adam: Option<&AdamState<T>>) -> Self {
        let names: Vec<&str> = net.params.names().collect();
        let mut tensors: Vec<(String, Tensor<f32>)> = names
            .iter()
            .zip(&net.params.tensors)
            .map(|(n, t)| (n.to_string(), t.cast()))
            .collect();
        if let Some(st) = adam {
            for (prefix, moments) in [("adam.m.", &st.m), ("adam.v.", &st.v)] {
                tensors.extend(
                    names
                        .iter()
                        .zip(moments)
                        .map(|(n, t)| (format!("{prefix}{n}"), t.cast())),
                );
            }
        }
        Checkpoint {
            config: net.config.clone(),
            step,
            seed,
            adam_t: adam.map_or(0, |s| s.t),
            tensors,
        }
    }

    fn find(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {name}")))
    }

    pub fn network<T: Scalar>(&self) -> Result<Bpp<T>> {
        let params = BppParams::<f32>::build(&self.config, 0)?;
        let named = params
            .names()
            .map(|n| Ok((n.to_string(), self.find(n)?.cast())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bpp {
            config: self.config.clone(),
            params: BppParams::from_named(&self.config, named)?,
        })
    }

    /// Optimizer state, if the checkpoint carries it.
    pub fn adam<T: Scalar>(&self) -> Result<Option<AdamState<T>>> {
        if !self.tensors.iter().any(|(n, _)| n.starts_with("adam.")) {
            return Ok(None);
        }
        let layout = crate::bpp::Layout::new(&self.config)?;
        let get = |prefix: &str| {
            layout
                .specs
                .iter()
                .map(|s| Ok(self.find(&format!("{prefix}{}", s.name))?.cast()))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Some(AdamState {
            t: self.adam_t,
            m: get("adam.m.")?,
            v: get("adam.v.")?,
        }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().as_array(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            adam_t: self.adam_t,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX {
            return Err(fmt_err(bytes.len(), "truncated checkpoint prefix"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err(0, "bad magic, not a BPP checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint version {version} (expected {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let data_start = (PREFIX as u64)
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| fmt_err(8, format!("header length {hlen} exceeds file size {}", bytes.len())))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX..data_start])
            .map_err(|e| fmt_err(PREFIX, format!("bad header JSON: {e}")))?;
        header.config.validate()?;
        let data = &bytes[data_start..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let at = data_start as u64 + e.offset;
            if e.offset != expected {
                return Err(fmt_err(
                    at as usize,
                    format!("tensor {} at offset {} (expected {expected})", e.name, e.offset),
                ));
            }
            let shape = Shape::from(e.shape);
            let nbytes = 4 * shape.len() as u64;
            let end = e.offset + nbytes;
            if end > data.len() as u64 {
                return Err(fmt_err(bytes.len(), format!("truncated data for tensor {}", e.name)));
            }
            let raw = &data[e.offset as usize..end as usize];
            let vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::from_vec(shape, vals)?));
            expected = end;
        }
        if expected != data.len() as u64 {
            return Err(fmt_err(
                data_start + expected as usize,
                "trailing bytes after tensor data",
            ));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            seed: header.seed,
            adam_t: header.adam_t,
            tensors,
        })
    }

    /// Writes atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let net = Bpp::<f32>::new(BppConfig::new(2, &[4, 3]), 3).unwrap();
        let mut st = AdamState::new(&net.params.tensors);
        st.t = 5;
        st.m[0].data_mut()[0] = 0.25;
        Checkpoint::new(&net, 12, 77, Some(&st))
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let b = ck.to_bytes().unwrap();
        assert_eq!(&b[..4], b"BPPC");
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), b);
        let st = back.adam::<f32>().unwrap().unwrap();
        assert_eq!((st.t, st.m[0].data()[0]), (5, 0.25));
        let net: Bpp<f32> = back.network().unwrap();
        assert_eq!(net, Bpp::new(BppConfig::new(2, &[4, 3]), 3).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let b = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&b[..10]),
            Err(Error::Format { offset: 10, .. })
        ));
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Unsupported(_))));
        let mut v = b.clone();
        v[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&v),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut v = b.clone();
        v.push(0);
        assert!(Checkpoint::from_bytes(&v).is_err());
    }

    #[test]
    fn without_optimizer_state() {
        let net = Bpp::<f64>::new(BppConfig::new(1, &[4]), 0).unwrap();
        let ck = Checkpoint::new(&net, 0, 0, None);
        assert!(ck.adam::<f64>().unwrap().is_none());
        assert_eq!(ck.tensors.len(), net.params.tensors.len());
    }
}
