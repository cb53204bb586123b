//! On-disk formats: single-tensor array files (`SWDTENS1`) and UTF-8
//! `key = value` text files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"SWDTENS1";
const HEADER_LEN: usize = 8 + 12;

/// Encodes a `C x H x W` (or `1 x C x H x W`) array.
pub fn encode_array(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = chw(t)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    for d in [c, h, w] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

fn chw(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::invalid("encode_array", format!("expected C x H x W array, got {s:?}"))),
    }
}

/// Decodes an array file as a `1 x C x H x W` tensor.
pub fn decode_array(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 8 || &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "SWDTENS1",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = HEADER_LEN + 4 * c * h * w;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&[1, c, h, w], data)
}

pub fn write_array(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_array(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(path, &bytes)
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                msg: format!("line {}: expected `key = value`, got `{raw}`", i + 1),
            });
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(path, &text)
}

pub fn format_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
