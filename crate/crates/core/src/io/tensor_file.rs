//! Binary tensor records.
//!
//! ```text
//! offset 0  "TNSR"
//!        4  version, 0x01
//!        5  dtype: 0 = f32, 1 = f64, 2 = u8
//!        6  rank
//!        7  rank × u32 LE dims
//!        …  row-major LE payload
//! ```
//!
//! A file holds one record; a checkpoint parameter file holds several
//! back to back.

use std::path::Path;

use crate::error::{Error, ParseErrorKind, Result};
use crate::io::write_atomic;
use crate::tensor::{ScalarKind, Tensor};

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u8 = 0x01;
pub const HEADER_FIXED: usize = 7;

/// Element types with a file encoding.
pub trait Element: Copy + Sized {
    const KIND: ScalarKind;
    fn put(self, out: &mut Vec<u8>);
    /// `bytes.len() == KIND.width()`
    fn take(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const KIND: ScalarKind = ScalarKind::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const KIND: ScalarKind = ScalarKind::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().expect("8 bytes"))
    }
}

impl Element for u8 {
    const KIND: ScalarKind = ScalarKind::U8;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn take(b: &[u8]) -> Self {
        b[0]
    }
}

/// A decoded record of any supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn kind(&self) -> ScalarKind {
        match self {
            AnyTensor::F32(_) => ScalarKind::F32,
            AnyTensor::F64(_) => ScalarKind::F64,
            AnyTensor::U8(_) => ScalarKind::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }
}

pub fn encoded_len<T: Element>(t: &Tensor<T>) -> usize {
    HEADER_FIXED + 4 * t.rank() + t.len() * T::KIND.width()
}

/// Appends the record for `t` to `out`.
pub fn encode_into<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank {} exceeds 255", t.rank())))?;
    out.reserve(encoded_len(t));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::KIND.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.put(out);
    }
    Ok(())
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_into(t, &mut out)?;
    Ok(out)
}

fn parse_err(kind: ParseErrorKind, offset: usize) -> Error {
    Error::Parse { kind, offset }
}

struct Header {
    kind: ScalarKind,
    shape: Vec<usize>,
    payload_at: usize,
}

fn read_header(bytes: &[u8], start: usize) -> Result<Header> {
    let at = |i: usize| bytes.get(start + i).copied();
    for (i, &m) in MAGIC.iter().enumerate() {
        match at(i) {
            Some(b) if b == m => {}
            Some(_) => return Err(parse_err(ParseErrorKind::BadMagic, start + i)),
            None => return Err(parse_err(ParseErrorKind::Truncated, start + i)),
        }
    }
    let version = at(4).ok_or_else(|| parse_err(ParseErrorKind::Truncated, start + 4))?;
    if version != VERSION {
        return Err(parse_err(ParseErrorKind::BadVersion(version), start + 4));
    }
    let code = at(5).ok_or_else(|| parse_err(ParseErrorKind::Truncated, start + 5))?;
    let kind = ScalarKind::from_code(code).ok_or_else(|| parse_err(ParseErrorKind::BadDtype(code), start + 5))?;
    let rank = at(6).ok_or_else(|| parse_err(ParseErrorKind::Truncated, start + 6))? as usize;
    let mut shape = Vec::with_capacity(rank);
    for r in 0..rank {
        let off = start + HEADER_FIXED + 4 * r;
        let b = bytes
            .get(off..off + 4)
            .ok_or_else(|| parse_err(ParseErrorKind::Truncated, bytes.len()))?;
        let d = u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(parse_err(ParseErrorKind::ZeroDim, off));
        }
        shape.push(d);
    }
    Ok(Header {
        kind,
        shape,
        payload_at: start + HEADER_FIXED + 4 * rank,
    })
}

fn read_payload<T: Element>(bytes: &[u8], h: &Header) -> Result<(Tensor<T>, usize)> {
    let n = h
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| parse_err(ParseErrorKind::Truncated, h.payload_at))?;
    let width = T::KIND.width();
    let end = n
        .checked_mul(width)
        .and_then(|len| h.payload_at.checked_add(len))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err(ParseErrorKind::Truncated, bytes.len()))?;
    let data = bytes[h.payload_at..end].chunks_exact(width).map(T::take).collect();
    Ok((Tensor::new(h.shape.clone(), data)?, end))
}

fn decode_at(bytes: &[u8], start: usize) -> Result<(AnyTensor, usize)> {
    let h = read_header(bytes, start)?;
    Ok(match h.kind {
        ScalarKind::F32 => {
            let (t, e) = read_payload::<f32>(bytes, &h)?;
            (AnyTensor::F32(t), e)
        }
        ScalarKind::F64 => {
            let (t, e) = read_payload::<f64>(bytes, &h)?;
            (AnyTensor::F64(t), e)
        }
        ScalarKind::U8 => {
            let (t, e) = read_payload::<u8>(bytes, &h)?;
            (AnyTensor::U8(t), e)
        }
    })
}

/// Decodes exactly one record of any dtype.
pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, end) = decode_at(bytes, 0)?;
    if end != bytes.len() {
        return Err(parse_err(ParseErrorKind::TrailingBytes, end));
    }
    Ok(t)
}

/// Decodes exactly one record, which must have dtype `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = read_header(bytes, 0)?;
    if h.kind != T::KIND {
        let kind = ParseErrorKind::DtypeMismatch {
            expected: T::KIND.code(),
            found: h.kind.code(),
        };
        return Err(parse_err(kind, 5));
    }
    let (t, end) = read_payload::<T>(bytes, &h)?;
    if end != bytes.len() {
        return Err(parse_err(ParseErrorKind::TrailingBytes, end));
    }
    Ok(t)
}

/// Decodes a concatenation of records.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<AnyTensor>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (t, end) = decode_at(bytes, at)?;
        out.push(t);
        at = end;
    }
    Ok(out)
}

pub fn write_tensor<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode(t)?)
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_any(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_any(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_2x3_f32_is_39_bytes() {
        let t = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(b.len(), 39);
        assert_eq!(&b[..7], &[0x54, 0x4E, 0x53, 0x52, 1, 0, 2]);
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(decode::<f32>(&b).unwrap(), t);
    }

    #[test]
    fn header_corruptions_name_their_offset() {
        let good = encode(&Tensor::<u8>::new(vec![3], vec![1, 2, 3]).unwrap()).unwrap();
        let with = |i: usize, v: u8| {
            let mut b = good.clone();
            b[i] = v;
            b
        };
        let kind = |b: &[u8]| match decode_any(b) {
            Err(Error::Parse { kind, offset }) => (kind, offset),
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(kind(&with(0, b'X')), (ParseErrorKind::BadMagic, 0));
        assert_eq!(kind(&with(4, 2)), (ParseErrorKind::BadVersion(2), 4));
        assert_eq!(kind(&with(5, 9)), (ParseErrorKind::BadDtype(9), 5));
        assert_eq!(kind(&with(7, 0)), (ParseErrorKind::ZeroDim, 7));
        assert_eq!(kind(&good[..good.len() - 1]).0, ParseErrorKind::Truncated);
        assert_eq!(kind(&good[..3]), (ParseErrorKind::Truncated, 3));
        let mut long = good.clone();
        long.push(0);
        assert_eq!(kind(&long), (ParseErrorKind::TrailingBytes, good.len()));
        assert!(matches!(
            decode::<f32>(&good),
            Err(Error::Parse {
                kind: ParseErrorKind::DtypeMismatch { expected: 0, found: 2 },
                offset: 5
            })
        ));
    }

    #[test]
    fn scalar_and_concatenated_records() {
        let a = Tensor::scalar(2.5f64);
        let b = Tensor::<f32>::new(vec![2, 1], vec![1.0, -0.0]).unwrap();
        let mut bytes = encode(&a).unwrap();
        encode_into(&b, &mut bytes).unwrap();
        let all = decode_all(&bytes).unwrap();
        assert_eq!(all, vec![AnyTensor::F64(a), AnyTensor::F32(b)]);
    }
}
