//! Checkpoint container (`SWDCKPT1`): named f32 tensors.
//!
//! Layout: magic, `u32` tensor count, then per tensor a `u16` name length,
//! the UTF-8 name, a `u8` rank, `rank` x `u32` dims and the little-endian
//! data. Model parameters keep their own names, as do the frozen loss
//! extractor weights (`extractor.*`); optimizer moments live under
//! `adam.m.*` / `adam.v.*`; counters and the config echo under `meta.*`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"SWDCKPT1";

/// Adam moments and step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    /// Completed optimizer steps.
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    /// Frozen perceptual-loss extractor weights.
    pub extractor: ParamStore<f32>,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
}

/// Splits a counter into two exactly representable 24-bit halves.
fn counter_tensor(v: u64) -> Tensor<f32> {
    assert!(v < 1 << 48, "counter overflow");
    Tensor::from_vec(&[2], vec![(v >> 24) as f32, (v & 0xff_ffff) as f32]).unwrap()
}

fn counter_value(t: &Tensor<f32>) -> Option<u64> {
    match t.data() {
        [hi, lo] if hi.fract() == 0.0 && lo.fract() == 0.0 && *hi >= 0.0 && *lo >= 0.0 => {
            Some(((*hi as u64) << 24) | *lo as u64)
        }
        _ => None,
    }
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::invalid("checkpoint", format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("checkpoint", format!("rank too large: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                got: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Manifest {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

/// Decodes every tensor; duplicate names and trailing bytes are rejected.
pub fn decode_tensors(path: &Path, bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "SWDCKPT1",
        });
    }
    let mut r = Reader { path, bytes, pos: 8 };
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&shape, data)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(r.bad(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let config: Vec<f32> = self.config.to_text().bytes().map(f32::from).collect();
        let config = Tensor::from_vec(&[config.len()], config)?;
        let step = counter_tensor(self.adam.t);
        let epoch = counter_tensor(self.epoch);
        let m: Vec<(String, &Tensor<f32>)> = self.adam.m.iter().map(|(k, v)| (format!("adam.m.{k}"), v)).collect();
        let v: Vec<(String, &Tensor<f32>)> = self.adam.v.iter().map(|(k, v)| (format!("adam.v.{k}"), v)).collect();
        if let Some(name) = self.params.names().find(|n| n.starts_with("extractor.")) {
            return Err(Error::invalid("checkpoint", format!("parameter `{name}` collides with the extractor")));
        }
        let mut all: Vec<(&str, &Tensor<f32>)> = self.params.iter().chain(self.extractor.iter()).collect();
        all.extend(m.iter().chain(&v).map(|(k, t)| (k.as_str(), *t)));
        all.extend([("meta.config", &config), ("meta.step", &step), ("meta.epoch", &epoch)]);
        encode_tensors(all)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let tensors = decode_tensors(path, bytes)?;
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        let meta = |name: &str| tensors.get(name).ok_or_else(|| bad(format!("missing `{name}`")));
        let text: Vec<u8> = meta("meta.config")?.data().iter().map(|v| *v as u8).collect();
        let text = String::from_utf8(text).map_err(|_| bad("config echo is not UTF-8".into()))?;
        let config = TrainConfig::from_text(path, &text)?;
        let t = counter_value(meta("meta.step")?).ok_or_else(|| bad("bad `meta.step`".into()))?;
        let epoch = counter_value(meta("meta.epoch")?).ok_or_else(|| bad("bad `meta.epoch`".into()))?;
        let mut params = ParamStore::new();
        let mut extractor = ParamStore::new();
        let mut adam = AdamState {
            t,
            ..AdamState::default()
        };
        for (name, tensor) in tensors {
            if name.starts_with("meta.") {
                continue;
            } else if let Some(n) = name.strip_prefix("adam.m.") {
                adam.m.insert(n, tensor);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                adam.v.insert(n, tensor);
            } else if name.starts_with("extractor.") {
                extractor.insert(name, tensor);
            } else {
                params.insert(name, tensor);
            }
        }
        Ok(Checkpoint {
            config,
            params,
            extractor,
            adam,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }
}
