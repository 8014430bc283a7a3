//! Binary checkpoint format for policy parameters.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"FVR1"
//! 4       4     format version (u32, currently 1)
//! 8       4     vocab_size   (u32)
//! 12      4     feature_dim  (u32)
//! 16      4     hidden_dim   (u32)
//! 20      8·n   parameter values (f64), flat block order:
//!               embedding, context_projection, hidden_weights,
//!               hidden_bias, output_projection, output_bias
//! ```
//!
//! `n` is determined by the shape. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, PolicyShape};

const MAGIC: [u8; 4] = *b"FVR1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Serializes parameters into the checkpoint byte layout.
pub fn to_bytes(params: &PolicyParams) -> Vec<u8> {
    let shape = params.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.values().len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(shape.vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&(shape.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(shape.hidden_dim as u32).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses a checkpoint from bytes, validating magic, version, and length.
pub fn from_bytes(bytes: &[u8]) -> Result<PolicyParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!(
            "file too short: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".to_string()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let shape = PolicyShape::new(
        u32_at(8) as usize,
        u32_at(12) as usize,
        u32_at(16) as usize,
    )
    .map_err(|e| Error::Checkpoint(format!("invalid shape in header: {e}")))?;

    let expected = HEADER_LEN + 8 * shape.param_count();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "length {} does not match shape ({} expected for {} parameters)",
            bytes.len(),
            expected,
            shape.param_count()
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PolicyParams::from_values(shape, values)
        .map_err(|e| Error::Checkpoint(format!("invalid parameter values: {e}")))
}

pub fn save(params: &PolicyParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<PolicyParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
