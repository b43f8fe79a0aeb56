//! IDX container: two zero bytes, a dtype byte, a dimension count, one
//! big-endian `u32` extent per dimension, then the payload.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

/// Unsigned byte, the only dtype the MNIST family uses.
pub const IDX_UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        let offset = if bytes[0] != 0 { 0 } else { 1 };
        return Err(parse_err(offset, format!("bad magic {:02x} {:02x}", bytes[0], bytes[1])));
    }
    let dtype = bytes[2];
    if dtype != IDX_UBYTE {
        return Err(parse_err(2, format!("unsupported dtype 0x{dtype:02x}")));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(parse_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse_err(bytes.len(), format!("truncated header: {ndim} extents need {header} bytes")));
    }
    let shape: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(4, "extent product overflows"))?;
    let end = header.checked_add(len).ok_or_else(|| parse_err(4, "extent product overflows"))?;
    if bytes.len() < end {
        return Err(parse_err(bytes.len(), format!("truncated payload: expected {len} bytes after the header")));
    }
    if bytes.len() > end {
        return Err(parse_err(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok(IdxArray { dtype, shape, data: bytes[header..].to_vec() })
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.shape.len() + array.data.len());
    out.extend_from_slice(&[0, 0, array.dtype, array.shape.len() as u8]);
    for &d in &array.shape {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Reads an IDX file, transparently gunzipping when it starts with the gzip magic.
pub fn read_idx_file(path: &Path) -> Result<IdxArray> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => {
            Error::Parse { offset, message: format!("{message} ({})", path.display()) }
        }
        other => other,
    })
}
