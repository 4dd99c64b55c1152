//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "TERD"
//! version      u32      = 1
//! config       u32 byte length + UTF-8 text (key=value lines)
//! count        u32      number of tensors
//! per tensor:
//!   name       u32 byte length + UTF-8
//!   kind       u8       0 = dense f32, 1 = packed ternary
//!   rank       u8
//!   dims       rank × u64
//!   kind 1:    alpha f32, pad_count u8, payload length u64, payload
//!   kind 0:    payload length u64 (bytes), row-major f32 values
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::bitpack::PackedTernary;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TERD";
pub const VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_PACKED: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    Dense { shape: Vec<usize>, values: Vec<f32> },
    Packed(PackedTernary),
}

impl TensorData {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorData::Dense { shape, .. } => shape.clone(),
            TensorData::Packed(p) => vec![p.rows(), p.cols()],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Bytes of numeric content: `4·numel` for dense tensors, the packed
    /// payload plus the 4-byte `α` for packed ones.
    pub fn payload_bytes(&self) -> usize {
        match self {
            TensorData::Dense { values, .. } => 4 * values.len(),
            TensorData::Packed(p) => 4 + p.payload().len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self { config: config.into(), tensors: Vec::new() }
    }

    pub fn push_dense(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", values.len())));
        }
        self.push(name.into(), TensorData::Dense { shape, values })
    }

    pub fn push_packed(&mut self, name: impl Into<String>, p: PackedTernary) -> Result<()> {
        self.push(name.into(), TensorData::Packed(p))
    }

    fn push(&mut self, name: String, data: TensorData) -> Result<()> {
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.push(NamedTensor { name, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.data)
    }

    pub fn has_packed(&self) -> bool {
        self.tensors.iter().any(|t| matches!(t.data, TensorData::Packed(_)))
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.data.payload_bytes()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serialize(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        deserialize(&fs::read(path)?)
    }
}

/// Encodes a checkpoint. Output is a pure function of the checkpoint.
pub fn serialize(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for t in &ckpt.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::DuplicateName(t.name.clone()));
        }
    }
    let mut out = Vec::with_capacity(64 + ckpt.payload_bytes());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &ckpt.config)?;
    put_u32(&mut out, ckpt.tensors.len())?;
    for t in &ckpt.tensors {
        put_str(&mut out, &t.name)?;
        let shape = t.data.shape();
        out.push(match t.data {
            TensorData::Dense { .. } => KIND_DENSE,
            TensorData::Packed(_) => KIND_PACKED,
        });
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?);
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::Packed(p) => {
                out.extend_from_slice(&p.alpha().to_le_bytes());
                out.push(p.pad_count());
                out.extend_from_slice(&(p.payload().len() as u64).to_le_bytes());
                out.extend_from_slice(p.payload());
            }
            TensorData::Dense { values, .. } => {
                out.extend_from_slice(&((4 * values.len()) as u64).to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Truncated { offset: self.pos, needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.array()?);
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} overflows usize")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Decodes a checkpoint, rejecting bad magic, unknown versions, truncation,
/// trailing bytes and duplicate tensor names.
pub fn deserialize(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut ckpt = Checkpoint::new(r.string()?);
    let count = r.u32()?;
    for _ in 0..count {
        let name = r.string()?;
        let kind = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let data = match kind {
            KIND_PACKED => {
                if rank != 2 {
                    return Err(Error::Format(format!("packed tensor {name:?} has rank {rank}")));
                }
                let alpha = r.f32()?;
                let pad = r.u8()?;
                let len = r.u64()?;
                let payload = r.take(len)?.to_vec();
                TensorData::Packed(PackedTernary::new(shape[0], shape[1], alpha, pad, payload)?)
            }
            KIND_DENSE => {
                let len = r.u64()?;
                if Some(len) != numel.checked_mul(4) {
                    return Err(Error::Format(format!(
                        "dense tensor {name:?} declares {len} bytes for {numel} floats"
                    )));
                }
                let values = r
                    .take(len)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect();
                TensorData::Dense { shape, values }
            }
            k => return Err(Error::Format(format!("unknown tensor kind {k}"))),
        };
        ckpt.push(name, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ckpt)
}
