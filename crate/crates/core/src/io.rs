//! Tensor file I/O.
//!
//! The on-disk tensor format ("OVCT") is the exchange surface for features,
//! images and checkpoints; the byte layout is normative:
//!
//! ```text
//! magic "OVCT" | u32 LE rank | rank x u32 LE extents | row-major f32 LE payload
//! ```
//!
//! Values are stored as f32; loading yields f64 tensors whose values are
//! exactly the stored f32s, so save -> load -> save reproduces a file byte
//! for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OVCT";

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + t.dims().len() * 4 + t.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        if d > u32::MAX as usize {
            return Err(Error::arg("save_tensor", format!("extent {} exceeds u32", d)));
        }
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "file too short for header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "magic mismatch, expected OVCT"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + rank * 4;
    if bytes.len() < header_end {
        return Err(Error::format(path, "truncated extent list"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + i * 4;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let expected = header_end + count * 4;
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, dims {:?} need {}", bytes.len() - header_end, dims, count * 4),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header_end + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Tensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Serializes `value` as pretty JSON with a trailing newline. Output is
/// deterministic as long as the type serializes its fields in a fixed
/// order (structs do; use BTreeMap rather than HashMap).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(Error::Json)
}

/// Rounds to 6 decimal places; report files use this so that reruns diff
/// cleanly.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}
