//! Shared binary framing for checkpoints (`HFAM`), Gram sidecars (`HFGM`)
//! and dataset dumps (`HFDT`).
//!
//! ```text
//! magic      4 bytes
//! version    u16 little-endian
//! manifest   u32 little-endian length, then UTF-8 JSON
//! payload    f64 little-endian values, count given by the manifest
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;

pub type Magic = [u8; 4];

pub const CHECKPOINT_MAGIC: Magic = *b"HFAM";
pub const GRAM_MAGIC: Magic = *b"HFGM";
pub const DATASET_MAGIC: Magic = *b"HFDT";

/// Implemented by manifests that know how many payload values follow them.
pub trait Manifest: Serialize + DeserializeOwned {
    fn payload_len(&self) -> usize;
}

pub fn encode<M: Manifest>(magic: Magic, manifest: &M, payload: &[f64]) -> Result<Vec<u8>> {
    if payload.len() != manifest.payload_len() {
        return Err(Error::Format(format!(
            "manifest declares {} values, payload has {}",
            manifest.payload_len(),
            payload.len()
        )));
    }
    let text = serde_json::to_string(manifest)
        .map_err(|e| Error::Format(format!("manifest serialisation: {e}")))?;
    let text_len = u32::try_from(text.len())
        .map_err(|_| Error::Format("manifest larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(10 + text.len() + payload.len() * 8);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&text_len.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<M: Manifest>(magic: Magic, bytes: &[u8]) -> Result<(M, Vec<f64>)> {
    if bytes.len() < 10 {
        return Err(Error::Format("truncated header".into()));
    }
    if bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = &bytes[10..];
    if body.len() < len {
        return Err(Error::Format("truncated manifest".into()));
    }
    let text = std::str::from_utf8(&body[..len])
        .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?;
    let manifest: M =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let payload = &body[len..];
    let expected = manifest.payload_len();
    if payload.len() != expected * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, manifest declares {} values",
            payload.len(),
            expected
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight")))
        .collect();
    Ok((manifest, values))
}

pub fn write_file<M: Manifest>(path: &Path, magic: Magic, manifest: &M, payload: &[f64]) -> Result<()> {
    fs::write(path, encode(magic, manifest, payload)?)?;
    Ok(())
}

pub fn read_file<M: Manifest>(path: &Path, magic: Magic) -> Result<(M, Vec<f64>)> {
    decode(magic, &fs::read(path)?)
}
