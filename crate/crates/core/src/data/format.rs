//! The `.mrd` dataset container.
//!
//! Layout, little-endian with no padding:
//!
//! ```text
//! "MRD1" | u32 N | u8 D | D x u32 extent | u32 C | u32 m
//!        | N x (extents.. x C) f32 samples | N x m f32 labels
//! ```
//!
//! Samples are row-major over the spatial axes with the channel fastest.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::Dataset;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"MRD1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {found:?}, expected {expected:?}")]
    Version { found: [u8; 4], expected: [u8; 4] },
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("declared extents overflow the addressable size")]
    Overflow,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Malformed(String),
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self) -> Result<[u8; 4], FormatError> {
        Ok(self.take(4)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize, FormatError> {
        Ok(self.u32()? as usize)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = n.checked_mul(4).ok_or(FormatError::Overflow)?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = n.checked_mul(8).ok_or(FormatError::Overflow)?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

pub(crate) fn check_magic(found: [u8; 4], expected: [u8; 4]) -> Result<(), FormatError> {
    if found == expected {
        Ok(())
    } else if found[..3] == expected[..3] {
        Err(FormatError::Version { found, expected })
    } else {
        Err(FormatError::BadMagic { found, expected })
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("extent fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let shape = data.sample_shape();
    let (channels, spatial) = shape.split_last().unwrap();
    let mut out = Vec::with_capacity(32 + 4 * (data.samples().len() + data.labels().len()));
    out.extend_from_slice(&DATASET_MAGIC);
    put_u32(&mut out, data.len());
    out.push(spatial.len() as u8);
    for &e in spatial {
        put_u32(&mut out, e);
    }
    put_u32(&mut out, *channels);
    put_u32(&mut out, data.label_len());
    for &v in data.samples().data().iter().chain(data.labels().data()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader::new(bytes);
    check_magic(r.magic()?, DATASET_MAGIC)?;
    let n = r.usize()?;
    let dims = r.u8()? as usize;
    if !(1..=3).contains(&dims) {
        return Err(FormatError::Malformed(format!("{dims} spatial axes")));
    }
    let mut shape = vec![n];
    for _ in 0..dims {
        shape.push(r.usize()?);
    }
    let channels = r.usize()?;
    shape.push(channels);
    let m = r.usize()?;
    if shape.contains(&0) || m == 0 {
        return Err(FormatError::Malformed(format!(
            "zero extent in sample shape {shape:?} or label length {m}"
        )));
    }
    let sample_count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or(FormatError::Overflow)?;
    let label_count = n.checked_mul(m).ok_or(FormatError::Overflow)?;
    let samples = r.f32s(sample_count)?;
    let labels = r.f32s(label_count)?;
    r.finish()?;
    let samples = Tensor::new(shape, samples).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let labels = Tensor::new(vec![n, m], labels).map_err(|e| FormatError::Malformed(e.to_string()))?;
    Dataset::new(samples, labels).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, encode_dataset(data))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, FormatError> {
    decode_dataset(&fs::read(path)?)
}
