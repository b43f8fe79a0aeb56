//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "CAPSADCK"
//! format version   u32
//! scale            7 × u32  conv, primary channels, primary dim, digit dim,
//!                           routing iterations, decoder hidden 0, decoder hidden 1
//! seed             u64
//! training step    u64
//! tensor count     u32
//! per tensor:      u16 name length, name (UTF-8), u8 rank, rank × u32 extents,
//!                  prod(extents) × f32 values
//! ```

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::TENSOR_NAMES;
use super::{ArchitectureScale, NetworkParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"CAPSADCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &NetworkParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let s = &params.scale;
    for v in [
        s.conv_channels,
        s.primary_capsule_channels,
        s.primary_capsule_dim,
        s.digit_capsule_dim,
        s.routing_iterations,
        s.decoder_hidden[0],
        s.decoder_hidden[1],
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.seed.to_le_bytes());
    out.extend_from_slice(&params.step.to_le_bytes());
    out.extend_from_slice(&(TENSOR_NAMES.len() as u32).to_le_bytes());
    for (name, t) in params.named_tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<NetworkParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let scale = ArchitectureScale {
        conv_channels: dims[0],
        primary_capsule_channels: dims[1],
        primary_capsule_dim: dims[2],
        digit_capsule_dim: dims[3],
        routing_iterations: dims[4],
        decoder_hidden: [dims[5], dims[6]],
    };
    let seed = r.u64()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", TENSOR_NAMES.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for want in TENSOR_NAMES {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != want {
            return Err(Error::Checkpoint(format!("expected tensor {want}, found {name}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let tensors: [Tensor<f32>; 11] = tensors.try_into().expect("count checked");
    NetworkParams::from_tensors(scale, seed, step, tensors).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save_checkpoint(params: &NetworkParams<f32>, path: &Path) -> Result<Vec<u8>> {
    let bytes = write_checkpoint(params);
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}
