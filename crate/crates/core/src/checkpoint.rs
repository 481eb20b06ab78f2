//! Binary snapshots of a [`TrainState`].
//!
//! Layout: 8-byte magic, little-endian u32 CRC-32 of the payload, then the
//! bincode payload. Floats are stored as raw bits, so a reload is bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"DDACKPT1";

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let payload =
        bincode::serialize(state).map_err(|e| Error::Checkpoint(format!("encode failed: {e}")))?;
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint header".into()));
    }
    let stored = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = &bytes[12..];
    if crc32fast::hash(payload) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    bincode::deserialize(payload).map_err(|e| Error::Checkpoint(format!("decode failed: {e}")))
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
