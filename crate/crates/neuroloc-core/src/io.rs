//! Binary array I/O: little-endian f64 payloads next to small JSON headers.
//!
//! Every exported artifact is a pair of files sharing a stem: `<stem>.json`
//! holds the metadata (dims, ordering, named segments) and `<stem>.bin` holds
//! the raw numbers. Keeping the payload as plain `f64le` makes the files
//! trivially readable from numpy (`np.fromfile`) or any plotter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named run of values inside a `.bin` payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    /// Offset in f64 elements (not bytes) from the start of the payload.
    pub offset: usize,
    /// Length in f64 elements.
    pub len: usize,
}

pub fn write_f64_bin(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64_bin(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Extract a named segment from a payload read with [`read_f64_bin`].
pub fn take_segment<'a>(data: &'a [f64], segments: &[Segment], name: &str) -> Result<&'a [f64]> {
    let seg = segments
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Format(format!("missing segment '{name}'")))?;
    data.get(seg.offset..seg.offset + seg.len)
        .ok_or_else(|| Error::Format(format!("segment '{name}' exceeds payload length")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
