//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"FLARECKP"
//! 8       4     u32    format version (1)
//! 12      8     u64    header length H in bytes
//! 20      H     UTF-8 JSON header:
//!               {"config": <object>, "params": [{"name": s, "shape": [r, c], "dtype": "f64"}, ...]}
//! 20+H    ...   parameter payloads in manifest order, r·c IEEE-754 f64 values each, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLARECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    params: Vec<ManifestEntry>,
}

pub fn encode_checkpoint(config: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        params: store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(n, t)| ManifestEntry {
                name: n.clone(),
                shape: t.shape(),
                dtype: "f64".into(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + store.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    store: &ParamStore,
) -> Result<String> {
    let bytes = encode_checkpoint(config, store)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Decoded checkpoint: echoed config plus named tensors in manifest order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
    pub sha256: String,
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 20 + hlen;
    let mut params = Vec::with_capacity(header.params.len());
    for entry in header.params {
        if entry.dtype != "f64" {
            return Err(corrupt(&format!("unsupported dtype {}", entry.dtype)));
        }
        let n = entry.shape[0] * entry.shape[1];
        let raw = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| corrupt(&format!("truncated payload for {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        params.push((
            entry.name,
            Tensor::from_vec(entry.shape[0], entry.shape[1], data)?,
        ));
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        sha256: sha256_hex(bytes),
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes, path)
}

/// Copies checkpoint tensors into `store`, matching by name and shape.
/// Every parameter of the store must be present.
pub fn restore_params(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (_, t) = ckpt
            .params
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(2, 3, vec![1.5, -0.0, 1e-300, f64::MIN_POSITIVE, 3.25, -7.0]).unwrap());
        s.add("b", Tensor::row_vector(vec![0.1; 4]));
        let cfg = serde_json::json!({"d_model": 4});
        let bytes = encode_checkpoint(&cfg, &s).unwrap();
        let ck = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.params.len(), 2);
        for ((n, t), (n2, t2)) in ck.params.iter().zip(s.names().iter().zip(s.tensors())) {
            assert_eq!(n, n2);
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let mut fresh = s.clone();
        fresh.tensors_mut()[0].fill(0.0);
        restore_params(&mut fresh, &ck).unwrap();
        assert_eq!(fresh, s);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(2, 2));
        let bytes = encode_checkpoint(&serde_json::json!({}), &s).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, Path::new("x")).is_err());
    }
}
