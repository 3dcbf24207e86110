//! Binary checkpoint format for [`NetworkParams`].
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NDBW"
//! 4       4     format version, u32 LE (currently 1)
//! 8       4     depth L, u32 LE
//! 12      4     width m, u32 LE
//! 16      4     input dimension d, u32 LE
//! 20      8     parameter count p, u64 LE
//! 28      8·p   weights as f64 LE, layer order W_1 … W_L, each row-major
//! ```

use super::{NetworkParams, NetworkShape};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NDBW";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let shape = params.shape();
    let flat = params.flatten();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * flat.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.depth as u32).to_le_bytes());
    out.extend_from_slice(&(shape.width as u32).to_le_bytes());
    out.extend_from_slice(&(shape.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Parse(format!(
            "checkpoint too short: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let depth = u32_at(bytes, 8) as usize;
    let width = u32_at(bytes, 12) as usize;
    let input_dim = u32_at(bytes, 16) as usize;
    let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));

    let shape = NetworkShape::new(depth, width, input_dim)
        .map_err(|e| Error::Parse(format!("checkpoint shape: {e}")))?;
    // Guard the count arithmetic before trusting the header.
    let expected = (width as u128) * (input_dim as u128)
        + (depth as u128 - 2) * (width as u128) * (width as u128)
        + width as u128;
    if count as u128 != expected {
        return Err(Error::Parse(format!(
            "checkpoint declares {count} parameters, shape implies {expected}"
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() as u128 != 8 * expected {
        return Err(Error::Parse(format!(
            "checkpoint body has {} bytes, expected {}",
            body.len(),
            8 * expected
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Parse(format!("checkpoint weight {i} is not finite")));
    }
    NetworkParams::unflatten(shape, values)
}
