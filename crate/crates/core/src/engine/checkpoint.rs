//! Flat named-array container.
//!
//! Layout: 8-byte magic `ARCHDSL1`, u64 LE header length `n`, `n` bytes of
//! JSON `{"tensors":[{"name":..,"shape":[..],"offset":k}, ..]}`, then the
//! payload of f64 LE values. `offset` counts f64 elements from the start of
//! the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EngineError, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"ARCHDSL1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
}

/// Serializes named tensors in the given order.
pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { tensors: entries }).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, EngineError> {
    let bad = |m: &str| EngineError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(&format!("header: {e}")))?;
    let payload = &bytes[hend..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    header
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data = values.get(e.offset..e.offset + n).ok_or_else(|| bad(&format!("tensor `{}` out of range", e.name)))?;
            Ok((e.name, Tensor::new(e.shape, data.to_vec())?))
        })
        .collect()
}

pub fn params_to_bytes(params: &ParamSet) -> Vec<u8> {
    let list: Vec<_> = params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    encode(&list)
}

/// Overwrites values of `params` by name. Every parameter must be present
/// with a matching shape.
pub fn load_params_from_bytes(params: &mut ParamSet, bytes: &[u8]) -> Result<(), EngineError> {
    let list = decode(bytes)?;
    let map: std::collections::HashMap<_, _> = list.into_iter().collect();
    for p in params.iter_mut() {
        let t = map.get(&p.name).ok_or_else(|| EngineError::Checkpoint(format!("missing tensor `{}`", p.name)))?;
        p.value.same_shape(t, &p.name)?;
        p.value = t.clone();
    }
    Ok(())
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<(), EngineError> {
    let mut f = std::fs::File::create(path).map_err(|e| EngineError::Checkpoint(e.to_string()))?;
    f.write_all(&params_to_bytes(params)).map_err(|e| EngineError::Checkpoint(e.to_string()))
}

pub fn load_params(params: &mut ParamSet, path: &Path) -> Result<(), EngineError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| EngineError::Checkpoint(e.to_string()))?;
    load_params_from_bytes(params, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE]));
        ps.add("b", Tensor::vector(vec![0.125]));
        let bytes = params_to_bytes(&ps);
        let mut other = ps.clone();
        other.iter_mut().for_each(|p| p.value.fill(0.0));
        load_params_from_bytes(&mut other, &bytes).unwrap();
        assert_eq!(other, ps);
    }

    #[test]
    fn corrupt_rejected() {
        assert!(decode(b"nonsense").is_err());
        let mut bytes = encode(&[("x".into(), Tensor::vector(vec![1.0, 2.0]))]);
        bytes.truncate(bytes.len() - 8);
        assert!(decode(&bytes).is_err());
    }
}
