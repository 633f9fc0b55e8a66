//! The EPGT binary tensor format.
//!
//! A file is one or more records, each laid out as
//!
//! ```text
//! magic    4 bytes  "EPGT"
//! version  u32      1
//! dtype    u32      0 = f32, 1 = f64, 2 = u32
//! ndim     u32
//! dims     ndim × u64
//! payload  product(dims) values, row-major
//! footer   u64      payload length in bytes
//! ```
//!
//! All integers and values are little-endian regardless of host. The footer
//! lets readers detect files cut short by an interrupted writer.

use std::path::Path;

use super::{atomic_write, read_file, Result, TensorIoError};

pub const MAGIC: [u8; 4] = *b"EPGT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            Self::F32 => 0,
            Self::F64 => 1,
            Self::U32 => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::F32),
            1 => Ok(Self::F64),
            2 => Ok(Self::U32),
            other => Err(TensorIoError::UnknownDType(other)),
        }
    }

    pub fn size(self) -> u64 {
        match self {
            Self::F32 | Self::U32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
            Self::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One record: shape plus values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

/// Payload bytes for a shape, or `DimOverflow` if it does not fit in u64.
pub fn payload_len(dims: &[u64], dtype: DType) -> Result<u64> {
    dims.iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or(TensorIoError::DimOverflow)
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or(TensorIoError::DimOverflow)?;
        if count != data.len() as u64 {
            return Err(TensorIoError::ShapeMismatch(format!(
                "dims {dims:?} hold {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<u64>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn f64(dims: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(values))
    }

    pub fn u32(dims: Vec<u64>, values: Vec<u32>) -> Result<Self> {
        Self::new(dims, TensorData::U32(values))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Some(v),
            _ => None,
        }
    }

    /// Values widened to f64; `None` for integer tensors.
    pub fn to_f64_vec(&self) -> Option<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Some(v.iter().map(|&x| f64::from(x)).collect()),
            TensorData::F64(v) => Some(v.clone()),
            TensorData::U32(_) => None,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.dtype().code().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        let start = out.len();
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        let payload = (out.len() - start) as u64;
        out.extend_from_slice(&payload.to_le_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64) -> Option<&'a [u8]> {
        let n = usize::try_from(n).ok()?;
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn remaining(&self) -> u64 {
        (self.bytes.len() - self.pos) as u64
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4).ok_or(TensorIoError::TruncatedHeader)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8).ok_or(TensorIoError::TruncatedHeader)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn decode_one(cur: &mut Cursor<'_>) -> Result<Tensor> {
    let magic = cur.take(4).ok_or(TensorIoError::TruncatedHeader)?;
    if magic != MAGIC {
        return Err(TensorIoError::BadMagic {
            found: magic.try_into().expect("4 bytes"),
        });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(TensorIoError::VersionMismatch { found: version });
    }
    let dtype = DType::from_code(cur.u32()?)?;
    let ndim = cur.u32()?;
    let dims = (0..ndim).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
    let expected = payload_len(&dims, dtype)?;
    if cur.remaining() < expected.saturating_add(8) {
        return Err(TensorIoError::TruncatedPayload {
            expected,
            available: cur.remaining().saturating_sub(8),
        });
    }
    let payload = cur.take(expected).expect("length checked");
    let footer = cur.u64()?;
    if footer != expected {
        return Err(TensorIoError::TruncatedPayload {
            expected,
            available: footer,
        });
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
        DType::U32 => TensorData::U32(
            payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
    };
    Ok(Tensor { dims, data })
}

/// Every record in a byte buffer.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.remaining() > 0 {
        out.push(decode_one(&mut cur)?);
    }
    if out.is_empty() {
        return Err(TensorIoError::TruncatedHeader);
    }
    Ok(out)
}

/// Exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let t = decode_one(&mut cur)?;
    if cur.remaining() > 0 {
        return Err(TensorIoError::TrailingData {
            bytes: cur.remaining(),
        });
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    atomic_write(path, &tensor.encode())
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut out = Vec::new();
    for t in tensors {
        t.encode_into(&mut out);
    }
    atomic_write(path, &out)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode(&read_file(path)?)
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    decode_all(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip_is_bit_exact() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let t = Tensor::f64(vec![3, 3], eye).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 16 + 72 + 8);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::u32(vec![2], vec![1, 0x0102_0304]).unwrap();
        let b = t.encode();
        assert_eq!(&b[0..4], b"EPGT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[28..32], &[4, 3, 2, 1]);
        assert_eq!(&b[32..40], &[8, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = Tensor::f32(vec![1], vec![1.0]).unwrap().encode();
        b[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&b), Err(TensorIoError::BadMagic { found }) if &found == b"XXXX"));
        let mut b = Tensor::f32(vec![1], vec![1.0]).unwrap().encode();
        b[4] = 2;
        assert!(matches!(
            decode(&b),
            Err(TensorIoError::VersionMismatch { found: 2 })
        ));
        let mut b = Tensor::f32(vec![1], vec![1.0]).unwrap().encode();
        b[8] = 9;
        assert!(matches!(decode(&b), Err(TensorIoError::UnknownDType(9))));
    }

    #[test]
    fn truncation_is_detected() {
        let b = Tensor::f32(vec![4], vec![1.0; 4]).unwrap().encode();
        for cut in [b.len() - 1, b.len() - 8, 30] {
            assert!(
                matches!(
                    decode(&b[..cut]),
                    Err(TensorIoError::TruncatedPayload { .. })
                ),
                "cut {cut}"
            );
        }
        assert!(matches!(
            decode(&b[..10]),
            Err(TensorIoError::TruncatedHeader)
        ));
    }

    #[test]
    fn dense_attention_size_guard() {
        let dims = [16u64, 2748, 2748];
        assert_eq!(
            payload_len(&dims, DType::F32).unwrap(),
            16 * 2748 * 2748 * 4
        );
        assert_eq!(payload_len(&dims, DType::F32).unwrap(), 483_296_256);
        let mut header = Vec::new();
        header.extend_from_slice(b"EPGT");
        header.extend_from_slice(&1u32.to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        header.extend_from_slice(&3u32.to_le_bytes());
        for d in dims {
            header.extend_from_slice(&d.to_le_bytes());
        }
        header.extend_from_slice(&[0u8; 64]);
        match decode(&header) {
            Err(TensorIoError::TruncatedPayload { expected, .. }) => {
                assert_eq!(expected, 483_296_256)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overflowing_dims_rejected() {
        let mut b = Vec::new();
        b.extend_from_slice(b"EPGT");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&3u64.to_le_bytes());
        assert!(matches!(decode(&b), Err(TensorIoError::DimOverflow)));
    }

    #[test]
    fn shape_must_match_values() {
        assert!(matches!(
            Tensor::f32(vec![2, 2], vec![0.0; 3]),
            Err(TensorIoError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn multi_record_and_trailing_data() {
        let a = Tensor::f32(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::u32(vec![], vec![7]).unwrap();
        let mut bytes = a.encode();
        b.encode_into(&mut bytes);
        assert_eq!(decode_all(&bytes).unwrap(), vec![a, b]);
        assert!(matches!(
            decode(&bytes),
            Err(TensorIoError::TrailingData { .. })
        ));
    }
}
