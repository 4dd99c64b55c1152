//! 2-bit packing of trit codes and the packed linear operator.
//!
//! Four trits share one byte. A trit `v ∈ {−1, 0, +1}` is stored as the
//! field `v + 1 ∈ {0, 1, 2}`; element `i` occupies bits
//! `7 − 2·(i mod 4) ..= 6 − 2·(i mod 4)` of byte `i / 4`, so the first
//! element sits in the two most significant bits. Trailing padding fields
//! hold `1` (the trit `0`). Field value `3` is reserved and marks a
//! corrupt payload.
//!
//! ```
//! use ternary_dit::bitpack::pack;
//! let (bytes, pad) = pack(&[1, 0, -1, 0]).unwrap();
//! assert_eq!((bytes, pad), (vec![0x91], 0));
//! ```

use crate::error::{Error, Result};
use crate::quant::{ternary_linear, TernaryTensor, TritRows};
use crate::real::Real;
use crate::tensor::Matrix;

const PAD_FIELD: u8 = 1;

/// Packs a flat trit sequence. Returns the payload and the number of
/// padding fields in the last byte.
pub fn pack(codes: &[i8]) -> Result<(Vec<u8>, u8)> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (i, &v) in codes.iter().enumerate() {
        if !(-1..=1).contains(&v) {
            return Err(Error::Domain(format!("value {v} at index {i} is not a trit")));
        }
        out[i / 4] |= ((v + 1) as u8) << field_shift(i);
    }
    for i in codes.len()..out.len() * 4 {
        out[i / 4] |= PAD_FIELD << field_shift(i);
    }
    Ok((out, pad_count(codes.len())))
}

/// Inverse of [`pack`] for a sequence of `len` trits.
pub fn unpack(payload: &[u8], len: usize) -> Result<Vec<i8>> {
    check_payload_len(payload.len(), len)?;
    (0..len).map(|i| decode(payload, i)).collect()
}

#[inline]
fn field_shift(i: usize) -> u32 {
    6 - 2 * (i % 4) as u32
}

#[inline]
fn field(payload: &[u8], i: usize) -> u8 {
    (payload[i / 4] >> field_shift(i)) & 0b11
}

#[inline]
fn decode(payload: &[u8], i: usize) -> Result<i8> {
    match field(payload, i) {
        3 => Err(Error::Corrupt { index: i }),
        f => Ok(f as i8 - 1),
    }
}

fn pad_count(len: usize) -> u8 {
    ((4 - len % 4) % 4) as u8
}

fn check_payload_len(bytes: usize, len: usize) -> Result<()> {
    if bytes != len.div_ceil(4) {
        return Err(Error::Format(format!("payload of {bytes} bytes cannot hold exactly {len} trits")));
    }
    Ok(())
}

/// A ternary weight matrix in its 2-bit storage form.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedTernary {
    rows: usize,
    cols: usize,
    alpha: f32,
    pad_count: u8,
    payload: Vec<u8>,
}

impl PackedTernary {
    /// Validates and wraps a raw payload. Every field, padding included, is
    /// checked so later unpacking cannot fail.
    pub fn new(rows: usize, cols: usize, alpha: f32, pad: u8, payload: Vec<u8>) -> Result<Self> {
        let len = rows * cols;
        check_payload_len(payload.len(), len)?;
        if pad != pad_count(len) {
            return Err(Error::Format(format!("pad count {pad} inconsistent with {len} elements")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha must be positive and finite, got {alpha}")));
        }
        for i in 0..payload.len() * 4 {
            let f = field(&payload, i);
            if f == 3 {
                return Err(Error::Corrupt { index: i });
            }
            if i >= len && f != PAD_FIELD {
                return Err(Error::Format(format!("padding field {i} holds {f}, expected 1")));
            }
        }
        Ok(Self { rows, cols, alpha, pad_count: pad, payload })
    }

    pub fn from_ternary(t: &TernaryTensor<f32>) -> Self {
        let (payload, pad_count) = pack(t.codes()).expect("ternary tensor holds valid trits");
        Self { rows: t.rows(), cols: t.cols(), alpha: t.alpha(), pad_count, payload }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn pad_count(&self) -> u8 {
        self.pad_count
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn codes(&self) -> Result<Vec<i8>> {
        unpack(&self.payload, self.rows * self.cols)
    }

    pub fn to_ternary(&self) -> Result<TernaryTensor<f32>> {
        TernaryTensor::new(self.rows, self.cols, self.codes()?, self.alpha)
    }
}

impl<T: Real> TritRows<T> for PackedTernary {
    fn out_features(&self) -> usize {
        self.rows
    }

    fn in_features(&self) -> usize {
        self.cols
    }

    fn fill_rows(&self, r0: usize, r1: usize, out: &mut [T]) {
        let alpha = T::from_f64_lossy(f64::from(self.alpha));
        let lut = [-alpha, T::zero(), alpha];
        let start = r0 * self.cols;
        for (k, o) in out[..(r1 - r0) * self.cols].iter_mut().enumerate() {
            // fields were validated in the constructor
            *o = lut[field(&self.payload, start + k) as usize];
        }
    }
}

/// `x · W̃ᵀ + bias` straight from the packed payload, unpacking one weight
/// tile at a time. Bit-identical to [`ternary_linear`] over the unpacked
/// [`TernaryTensor`].
pub fn packed_linear<T: Real>(x: &Matrix<T>, p: &PackedTernary, bias: Option<&[T]>) -> Result<Matrix<T>> {
    ternary_linear(x, p, bias)
}
