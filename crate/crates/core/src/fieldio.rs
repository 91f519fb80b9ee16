//! Field files: a JSON header sidecar next to a raw little-endian `f32`
//! payload in channel, latitude, longitude order.
//!
//! `foo.json` describes `foo.bin`; the header carries the SHA-256 of the
//! payload, checked on every read.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{ChannelSchema, FieldState, GridSpec};

pub const FIELD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub format_version: u32,
    pub timestamp: i64,
    pub endianness: String,
    pub dtype: String,
    pub layout: String,
    pub payload: String,
    pub sha256: String,
    pub schema: ChannelSchema,
    pub grid: GridSpec,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_payload(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_payload(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Mismatch(format!(
            "payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`. Values are narrowed to `f32`.
pub fn write_field(stem: &Path, state: &FieldState) -> Result<FieldHeader> {
    let (json_path, bin_path) = paths(stem);
    let payload = encode_payload(state.values());
    let header = FieldHeader {
        format_version: FIELD_FORMAT_VERSION,
        timestamp: state.timestamp(),
        endianness: "little".into(),
        dtype: "f32".into(),
        layout: "channel,lat,lon".into(),
        payload: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(&payload),
        schema: (**state.schema()).clone(),
        grid: (**state.grid()).clone(),
    };
    crate::report::write_atomic(&bin_path, &payload)?;
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    crate::report::write_atomic(&json_path, text.as_bytes())?;
    Ok(header)
}

pub fn read_header(stem: &Path) -> Result<FieldHeader> {
    let (json_path, _) = paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: FieldHeader = serde_json::from_str(&text)?;
    if header.format_version != FIELD_FORMAT_VERSION
        || header.endianness != "little"
        || header.dtype != "f32"
    {
        return Err(Error::Mismatch(format!(
            "{}: unsupported field format (version {}, {} {})",
            json_path.display(),
            header.format_version,
            header.endianness,
            header.dtype
        )));
    }
    Ok(header)
}

/// Reads a field, re-using the given schema/grid handles when they match the
/// header so snapshots of one dataset share storage.
pub fn read_field_shared(
    stem: &Path,
    schema: Option<&Arc<ChannelSchema>>,
    grid: Option<&Arc<GridSpec>>,
) -> Result<FieldState> {
    let header = read_header(stem)?;
    let bin_path = stem.with_file_name(&header.payload);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != header.sha256 {
        return Err(Error::Checksum {
            path: bin_path,
            expected: header.sha256,
            actual,
        });
    }
    let schema = match schema {
        Some(s) if **s == header.schema => s.clone(),
        _ => Arc::new(header.schema),
    };
    let grid = match grid {
        Some(g) if **g == header.grid => g.clone(),
        _ => Arc::new(header.grid),
    };
    FieldState::new(schema, grid, decode_payload(&bytes)?, header.timestamp)
}

pub fn read_field(stem: &Path) -> Result<FieldState> {
    read_field_shared(stem, None, None)
}
