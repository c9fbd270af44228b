//! Versioned binary container shared by model checkpoints and dataset caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes      e.g. b"MOSACKPT"
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! payload      f64 values, in the order the header lists its arrays
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<()> {
    fs::write(path, encode(magic, header, payload)?).map_err(|e| Error::io(path, e))
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + json.len() + payload.len() * 8);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8], magic: &[u8; 8]) -> Result<(H, Vec<f64>)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(bad("bad magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported container version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < header_len || (body.len() - header_len) % 8 != 0 {
        return Err(bad("truncated container"));
    }
    let header = serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload = body[header_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let bytes = encode(b"MOSACKPT", &serde_json::json!({"a": 1}), &[1.0, 2.0]).unwrap();
        assert!(decode::<serde_json::Value>(&bytes, b"MOSADATA").is_err());
        assert!(decode::<serde_json::Value>(&bytes[..bytes.len() - 3], b"MOSACKPT").is_err());
        let (h, p): (serde_json::Value, _) = decode(&bytes, b"MOSACKPT").unwrap();
        assert_eq!(h["a"], 1);
        assert_eq!(p, vec![1.0, 2.0]);
    }
}
