//! Binary interchange formats for embeddings (`EMB1`) and latents (`LAT1`).
//!
//! Both share one layout: 4 magic bytes, three little-endian `u32` header
//! words, then little-endian IEEE-754 `f32` values in row-major order.
//! `EMB1` headers are `(rows, cols, flags)` with flag bit 0 marking a global
//! embedding (which must have exactly one row); `LAT1` headers are
//! `(channels, height, width)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Latent, Tensor};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const LAT_MAGIC: &[u8; 4] = b"LAT1";
pub const FLAG_GLOBAL: u32 = 1;

const HEADER_LEN: usize = 16;

/// A decoded file: magic, three header words, and the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensorFile {
    pub magic: [u8; 4],
    pub header: [u32; 3],
    pub values: Vec<f32>,
}

pub fn encode(magic: &[u8; 4], header: [u32; 3], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(magic);
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes and validates a buffer. `payload_len` maps the header to the
/// expected number of values.
pub fn decode(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 4],
    payload_len: impl Fn([u32; 3]) -> Result<usize>,
) -> Result<RawTensorFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than header"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", &bytes[..4], magic),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let header = [word(0), word(1), word(2)];
    let n = payload_len(header)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header implies {}", body.len(), 4 * n),
        ));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    Ok(RawTensorFile {
        magic: *magic,
        header,
        values,
    })
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn to_f32<T: Scalar>(data: &[T]) -> Vec<f32> {
    data.iter().map(|v| v.to_f64_lossy() as f32).collect()
}

pub fn encode_latent<T: Scalar>(latent: &Latent<T>) -> Result<Vec<u8>> {
    let s = latent.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("latent must be [C,H,W], got {s:?}")));
    }
    Ok(encode(
        LAT_MAGIC,
        [s[0] as u32, s[1] as u32, s[2] as u32],
        &to_f32(latent.data()),
    ))
}

pub fn write_latent<T: Scalar>(path: &Path, latent: &Latent<T>) -> Result<()> {
    write_atomic(path, &encode_latent(latent)?)
}

pub fn decode_latent<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Latent<T>> {
    let raw = decode(path, bytes, LAT_MAGIC, |h| {
        if h.contains(&0) {
            return Err(Error::format(path, "zero latent dimension"));
        }
        Ok(h.iter().map(|&d| d as usize).product())
    })?;
    let shape: Vec<usize> = raw.header.iter().map(|&d| d as usize).collect();
    Tensor::from_vec(&shape, raw.values.iter().map(|&v| T::of(v as f64)).collect())
}

pub fn read_latent<T: Scalar>(path: &Path) -> Result<Latent<T>> {
    decode_latent(path, &fs::read(path)?)
}
