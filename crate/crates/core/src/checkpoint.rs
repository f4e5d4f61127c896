//! Binary run container.
//!
//! Layout: magic `BSTL`, `u32` format version, `u64` payload length,
//! SHA-256 of the payload (32 bytes), payload. All integers little-endian.
//! The payload is the JSON encoding of a [`BoostRun`], which round-trips
//! every `f64` exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::boosting::BoostRun;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BSTL";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 32;

pub fn encode(run: &BoostRun) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(run)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<BoostRun> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Integrity(format!(
            "checkpoint truncated: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != len {
        return Err(Error::Integrity(format!(
            "checkpoint payload is {} bytes, header says {len}",
            payload.len()
        )));
    }
    if Sha256::digest(payload).as_slice() != &bytes[16..48] {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }
    serde_json::from_slice(payload)
        .map_err(|e| Error::Integrity(format!("checkpoint payload does not decode: {e}")))
}

pub fn save(run: &BoostRun, path: &Path) -> Result<()> {
    fs::write(path, encode(run)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BoostRun> {
    decode(&fs::read(path)?)
}
