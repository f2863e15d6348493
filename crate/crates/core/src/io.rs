//! Byte-level helpers and the float-block container shared by dataset and
//! sample files.
//!
//! Container layout (little-endian):
//!
//! | offset   | size | field                                                 |
//! |----------|------|-------------------------------------------------------|
//! | 0        | 8    | magic (`DFEMDATA` for datasets, `DFEMSAMP` for samples) |
//! | 8        | 8    | `u64` header length `H`, a multiple of 8              |
//! | 16       | H    | UTF-8 JSON header, right-padded with spaces           |
//! | 16 + H   | 8 F  | `f64` payload                                         |
//!
//! The payload therefore always starts 8-byte aligned; the header describes
//! how `F` values are grouped into records.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CONTAINER_PREAMBLE: usize = 16;

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_container<H: Serialize>(
    magic: &[u8; 8],
    header: &H,
    payload: &[f64],
) -> Result<Vec<u8>> {
    let mut json = serde_json::to_vec(header)?;
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(CONTAINER_PREAMBLE + json.len() + 8 * payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Returns the parsed header and the payload floats.
pub fn decode_container<H: DeserializeOwned>(
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(H, Vec<f64>)> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = r.u64()? as usize;
    let header: H = serde_json::from_slice(r.take(header_len)?)?;
    if !r.remaining().is_multiple_of(8) {
        return Err(Error::Format(
            "payload is not a whole number of f64 values".into(),
        ));
    }
    let n = r.remaining() / 8;
    let payload = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok((header, payload))
}

pub const SAMPLES_MAGIC: &[u8; 8] = b"DFEMSAMP";
pub const SAMPLES_FORMAT_VERSION: u32 = 1;

/// JSON header of a samples file: `n` rows of `dim` floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplesHeader {
    pub format_version: u32,
    pub dim: usize,
    pub n: usize,
    /// Free-form description of how the samples were produced.
    #[serde(default)]
    pub provenance: Value,
}

pub fn encode_samples(rows: &[Vec<f64>], provenance: Value) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, Vec::len);
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Format(
            "samples must be non-empty rows of one length".into(),
        ));
    }
    let header = SamplesHeader {
        format_version: SAMPLES_FORMAT_VERSION,
        dim,
        n: rows.len(),
        provenance,
    };
    encode_container(SAMPLES_MAGIC, &header, &rows.concat())
}

pub fn decode_samples(bytes: &[u8]) -> Result<(SamplesHeader, Vec<Vec<f64>>)> {
    let (header, payload): (SamplesHeader, Vec<f64>) = decode_container(SAMPLES_MAGIC, bytes)?;
    if header.format_version != SAMPLES_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported samples version {}",
            header.format_version
        )));
    }
    if header.dim == 0 || payload.len() != header.dim * header.n {
        return Err(Error::Format(format!(
            "payload holds {} floats, header promises {} x {}",
            payload.len(),
            header.n,
            header.dim
        )));
    }
    let rows = payload
        .chunks_exact(header.dim)
        .map(<[f64]>::to_vec)
        .collect();
    Ok((header, rows))
}

pub fn save_samples(path: &Path, rows: &[Vec<f64>], provenance: Value) -> Result<()> {
    write_atomic(path, &encode_samples(rows, provenance)?)
}

pub fn load_samples(path: &Path) -> Result<(SamplesHeader, Vec<Vec<f64>>)> {
    decode_samples(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn container_round_trip_and_alignment() {
        let header = json!({"a": 1, "b": "xyz"});
        let payload = vec![1.5, -2.0, f64::MIN_POSITIVE];
        let bytes = encode_container(b"DFEMTEST", &header, &payload).unwrap();
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(h % 8, 0);
        assert_eq!(bytes.len(), 16 + h + 24);
        let (back, data): (Value, Vec<f64>) = decode_container(b"DFEMTEST", &bytes).unwrap();
        assert_eq!(back, header);
        assert_eq!(data, payload);
        assert!(decode_container::<Value>(b"DFEMXXXX", &bytes).is_err());
        assert!(decode_container::<Value>(b"DFEMTEST", &bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn samples_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![-0.5, 3.25], vec![0.0, 1e-300]];
        let bytes = encode_samples(&rows, json!({"seed": 3})).unwrap();
        assert_eq!(&bytes[..8], SAMPLES_MAGIC);
        let (header, back) = decode_samples(&bytes).unwrap();
        assert_eq!((header.dim, header.n), (2, 3));
        assert_eq!(header.provenance["seed"], 3);
        assert_eq!(back, rows);
        assert!(encode_samples(&[vec![1.0], vec![1.0, 2.0]], Value::Null).is_err());
        assert!(decode_samples(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn atomic_write_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/c.bin");
        write_atomic(&path, b"hello").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"hello");
    }
}
