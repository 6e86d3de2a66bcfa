//! Flat little-endian parameter files.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` anchors per cell, then every weight
//! as an `f64` in [`ExtractorParams::to_flat`] order.

use std::path::Path;

use super::model::ExtractorParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CLUSDET\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_checkpoint(params: &ExtractorParams) -> Vec<u8> {
    let flat = params.to_flat();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.anchors_per_cell() as u32).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], file: &Path) -> Result<ExtractorParams> {
    let fail = |offset: usize, message: &str| Error::Format {
        file: file.to_path_buf(),
        offset,
        message: message.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "truncated checkpoint header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail(0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(8, &format!("unsupported checkpoint version {version}")));
    }
    let anchors = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if anchors == 0 {
        return Err(fail(12, "zero anchors per cell"));
    }
    let expected = ExtractorParams::zeros(anchors).num_params();
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected * 8 {
        return Err(fail(
            HEADER_LEN + body.len().min(expected * 8),
            &format!("expected {} weight bytes, found {}", expected * 8, body.len()),
        ));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ExtractorParams::from_flat(anchors, &flat)
}

pub fn save_checkpoint(params: &ExtractorParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ExtractorParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
