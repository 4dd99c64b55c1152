//! Binary portable pixmap (P6) encoding of images in `[−1, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Image;

/// `[−1, 1] → 0..=255`, clamping outside values and mapping NaN to 0.
pub fn to_byte<T: Real>(v: T) -> u8 {
    let x = ((v.to_f64_lossy() + 1.0) * 127.5).round();
    if x.is_nan() {
        0
    } else {
        x.clamp(0.0, 255.0) as u8
    }
}

/// Encodes a 3-channel image (or a 1-channel one as gray) as P6.
pub fn encode<T: Real>(img: &Image<T>) -> Result<Vec<u8>> {
    let (c, h, w) = img.shape();
    if c != 3 && c != 1 {
        return Err(Error::Shape(format!("P6 needs 1 or 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_byte(img.get(ch.min(c - 1), y, x)));
            }
        }
    }
    Ok(out)
}

pub fn write<T: Real>(path: impl AsRef<Path>, img: &Image<T>) -> Result<()> {
    std::fs::write(path, encode(img)?)?;
    Ok(())
}

/// Parses a P6 file with maxval 255 back to bytes `(width, height, rgb)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated pixmap header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad pixmap header field {s:?}")));
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(Error::Format("not an 8-bit P6 pixmap".into()));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 3 * w * h {
        return Err(Error::Format(format!("pixmap body has {} bytes, expected {}", body.len(), 3 * w * h)));
    }
    Ok((w, h, body.to_vec()))
}
