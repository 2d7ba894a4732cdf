//! Raster file I/O.
//!
//! MBT layout: the magic `MBT1`, then `height`, `width`, `bands` as
//! little-endian `u32`, then `height * width * bands` little-endian `f32`
//! samples, band-interleaved by pixel.
//!
//! Previews are binary PPM (`P6`, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::MultibandImage;
use crate::scalar::Scalar;

pub const MBT_MAGIC: &[u8; 4] = b"MBT1";
const MBT_HEADER_LEN: usize = 16;

pub fn encode_mbt<T: Scalar>(img: &MultibandImage<T>) -> Result<Vec<u8>> {
    let (h, w, b) = img.dims();
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::DimOverflow(format!("{what} = {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(MBT_HEADER_LEN + 4 * img.samples().len());
    out.extend_from_slice(MBT_MAGIC);
    out.extend_from_slice(&to_u32(h, "height")?.to_le_bytes());
    out.extend_from_slice(&to_u32(w, "width")?.to_le_bytes());
    out.extend_from_slice(&to_u32(b, "bands")?.to_le_bytes());
    for v in img.samples() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mbt(bytes: &[u8]) -> Result<MultibandImage<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MBT_MAGIC {
        return Err(Error::Format("missing MBT1 magic".into()));
    }
    if bytes.len() < MBT_HEADER_LEN {
        return Err(Error::Truncated {
            expected: MBT_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, b) = (word(0), word(1), word(2));
    let payload = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(b))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::DimOverflow(format!("{h}x{w}x{b}")))?;
    let body = &bytes[MBT_HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Truncated {
            expected: payload,
            found: body.len(),
        });
    }
    if body.len() > payload {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            body.len() - payload
        )));
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MultibandImage::from_vec(h, w, b, samples)
}

pub fn write_raster<T: Scalar>(img: &MultibandImage<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mbt(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<MultibandImage<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mbt(&bytes)
}

/// Renders three bands as an 8-bit RGB pixmap, each band min-max stretched
/// to `[0, 255]`. A band with zero span maps to 0.
pub fn encode_preview<T: Scalar>(img: &MultibandImage<T>, bands: [usize; 3]) -> Result<Vec<u8>> {
    if let Some(&b) = bands.iter().find(|&&b| b >= img.bands()) {
        return Err(Error::invalid(format!(
            "preview band {b} out of range for {}-band image",
            img.bands()
        )));
    }
    let ranges: Vec<(f64, f64)> = bands
        .iter()
        .map(|&b| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for px in img.samples().chunks_exact(img.bands()) {
                let v = px[b].as_f64();
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        })
        .collect();
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + 3 * img.pixels());
    out.extend_from_slice(header.as_bytes());
    for px in img.samples().chunks_exact(img.bands()) {
        for (&b, &(lo, hi)) in bands.iter().zip(&ranges) {
            let span = hi - lo;
            let level = if span > 0.0 {
                ((px[b].as_f64() - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.push(level);
        }
    }
    Ok(out)
}

pub fn export_preview<T: Scalar>(
    img: &MultibandImage<T>,
    bands: [usize; 3],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_preview(img, bands)?).map_err(|e| Error::io(path, e))
}
