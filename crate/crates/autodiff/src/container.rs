//! Flat binary container for named f64 arrays.
//!
//! Layout: the magic string `LFNET1`, a little-endian u64 header length, a
//! JSON header listing `{name, shape, offset}` per array (offset in bytes
//! into the payload), then the concatenated little-endian f64 payload.
//! Entries are written in name order, so equal parameter sets serialize to
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"LFNET1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn to_bytes(params: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in params {
        entries.push(Entry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&entries)
        .map_err(|e| Error::Container(format!("header encode failed: {}", e)))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Container(
            "missing LFNET1 magic; not a parameter container".into(),
        ));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_start = MAGIC.len() + 8;
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Container("truncated header".into()));
    }
    let entries: Vec<Entry> = serde_json::from_slice(&bytes[header_start..payload_start])
        .map_err(|e| Error::Container(format!("bad header JSON: {}", e)))?;
    let payload = &bytes[payload_start..];

    let mut out = BTreeMap::new();
    for entry in entries {
        let count: usize = entry.shape.iter().product();
        let begin = entry.offset as usize;
        let end = begin + count * 8;
        if end > payload.len() {
            return Err(Error::Container(format!(
                "array {:?} overruns payload ({} > {})",
                entry.name,
                end,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[begin..end].chunks_exact(8) {
            let mut b = [0u8; 8];
            b.copy_from_slice(chunk);
            data.push(f64::from_le_bytes(b));
        }
        if out
            .insert(entry.name.clone(), Tensor::new(entry.shape, data)?)
            .is_some()
        {
            return Err(Error::Container(format!(
                "duplicate array name {:?}",
                entry.name
            )));
        }
    }
    Ok(out)
}

pub fn save(path: &Path, params: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(
            "b.bias".to_string(),
            Tensor::vector(vec![0.25, -1.5, f64::MIN_POSITIVE]),
        );
        m.insert(
            "a.weight".to_string(),
            Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -0.125, 1e300, -0.0]).unwrap(),
        );
        m
    }

    #[test]
    fn roundtrip_is_exact() {
        let params = sample();
        let bytes = to_bytes(&params).unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn serialization_is_deterministic() {
        let params = sample();
        assert_eq!(to_bytes(&params).unwrap(), to_bytes(&params).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.lfnet");
        let params = sample();
        save(&path, &params).unwrap();
        assert_eq!(load(&path).unwrap(), params);
    }
}
