//! Binary and text file formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use crate::ecg_ode::Waveform;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}")]
    BadMagic { expected: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(&'static str),
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid content: {0}")]
    Invalid(String),
}

/// First 12 bytes of a waveform file; a little-endian u32 version follows.
pub const WAVEFORM_MAGIC: &[u8; 12] = b"ECGWM-WAVE\0\0";
pub const WAVEFORM_VERSION: u32 = 1;

pub fn waveform_to_bytes(w: &Waveform) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * w.as_flat().len());
    out.extend_from_slice(WAVEFORM_MAGIC);
    out.extend_from_slice(&WAVEFORM_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    for &v in w.as_flat() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn waveform_from_bytes(bytes: &[u8]) -> Result<Waveform, FormatError> {
    if bytes.len() < 32 {
        return Err(FormatError::Truncated("waveform header"));
    }
    if &bytes[..12] != WAVEFORM_MAGIC {
        return Err(FormatError::BadMagic { expected: "ECGWM-WAVE".into() });
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if version != WAVEFORM_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let channels = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    let len = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes")) as usize;
    let fs = f64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    let n = channels.checked_mul(len).ok_or_else(|| FormatError::Invalid("shape overflow".into()))?;
    let body = &bytes[32..];
    if body.len() != 4 * n {
        return Err(FormatError::Truncated("waveform samples"));
    }
    let samples = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Waveform::from_flat(samples, channels, fs).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write_waveform(path: &Path, w: &Waveform) -> Result<(), FormatError> {
    fs::write(path, waveform_to_bytes(w))?;
    Ok(())
}

pub fn read_waveform(path: &Path) -> Result<Waveform, FormatError> {
    waveform_from_bytes(&fs::read(path)?)
}

/// CSV with a `t_s` column followed by one column per channel label.
pub fn waveform_to_csv(w: &Waveform) -> String {
    let mut s = String::from("t_s");
    for l in w.channel_labels() {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for t in 0..w.len() {
        s.push_str(&format!("{}", t as f64 / w.sample_rate()));
        for c in 0..w.channels() {
            s.push_str(&format!(",{}", w.channel(c)[t]));
        }
        s.push('\n');
    }
    s
}

/// Framed checkpoint: magic, u64 header length, JSON header, little-endian f64 payload.
pub fn write_checkpoint<H: Serialize>(path: &Path, magic: &[u8], header: &H, weights: &[f64]) -> Result<(), FormatError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(magic, header, weights)?)?;
    Ok(())
}

pub fn checkpoint_bytes<H: Serialize>(magic: &[u8], header: &H, weights: &[f64]) -> Result<Vec<u8>, FormatError> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(magic.len() + 8 + json.len() + 8 * weights.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path, magic: &[u8]) -> Result<(H, Vec<f64>), FormatError> {
    parse_checkpoint(&fs::read(path)?, magic)
}

pub fn parse_checkpoint<H: DeserializeOwned>(bytes: &[u8], magic: &[u8]) -> Result<(H, Vec<f64>), FormatError> {
    if bytes.len() < magic.len() + 8 {
        return Err(FormatError::Truncated("checkpoint header"));
    }
    if &bytes[..magic.len()] != magic {
        return Err(FormatError::BadMagic { expected: String::from_utf8_lossy(magic).into_owned() });
    }
    let rest = &bytes[magic.len()..];
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(FormatError::Truncated("checkpoint json"));
    }
    let header = serde_json::from_slice(&rest[..hlen])?;
    let body = &rest[hlen..];
    if !body.len().is_multiple_of(8) {
        return Err(FormatError::Truncated("checkpoint weights"));
    }
    let weights = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, weights))
}

/// Packs `f32` records after a JSON header, framed like a checkpoint.
pub fn write_f32_records<H: Serialize>(path: &Path, magic: &[u8], header: &H, values: &[f32]) -> Result<(), FormatError> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(magic.len() + 8 + json.len() + 4 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_f32_records<H: DeserializeOwned>(path: &Path, magic: &[u8]) -> Result<(H, Vec<f32>), FormatError> {
    let bytes = fs::read(path)?;
    if bytes.len() < magic.len() + 8 || &bytes[..magic.len()] != magic {
        return Err(FormatError::BadMagic { expected: String::from_utf8_lossy(magic).into_owned() });
    }
    let rest = &bytes[magic.len()..];
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen || !(rest.len() - hlen).is_multiple_of(4) {
        return Err(FormatError::Truncated("record file"));
    }
    let header = serde_json::from_slice(&rest[..hlen])?;
    let values = rest[hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header, values))
}
