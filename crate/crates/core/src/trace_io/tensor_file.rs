//! `VSCN` tensor container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "VSCN"
//! 4       2           version (u16 LE, currently 1)
//! 6       1           dtype (0 = f32, 1 = f64)
//! 7       1           ndim (>= 1)
//! 8       8 * ndim    dims (u64 LE, each >= 1)
//! ..      elem * N    row-major little-endian payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"VSCN";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_FIXED: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn elem_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.ndim())
        .map_err(|_| Error::Shape(format!("{} dims exceed the format limit of 255", t.ndim())))?;
    let mut out = Vec::with_capacity(HEADER_FIXED + 8 * t.ndim() + dtype.elem_size() * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(ndim);
    for &d in t.shape() {
        // Tensor already rejects zero dims; kept so a hand-built shape can't slip through
        if d == 0 {
            return Err(Error::Shape("zero-sized dim cannot be written".into()));
        }
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for (i, &v) in t.data().iter().enumerate() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::Shape(format!(
                        "value {v} at flat index {i} is outside f32 range"
                    )));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated {what}")))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:?}, expected \"VSCN\""),
        ));
    }
    let version = u16::from_le_bytes(take(bytes, 4, 2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let code = take(bytes, 6, 1, "dtype")?[0];
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| Error::format(6, format!("unknown dtype code {code}")))?;
    let ndim = take(bytes, 7, 1, "ndim")?[0] as usize;
    if ndim == 0 {
        return Err(Error::format(7, "ndim must be at least 1"));
    }

    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for axis in 0..ndim {
        let at = HEADER_FIXED + 8 * axis;
        let raw = u64::from_le_bytes(take(bytes, at, 8, "dims")?.try_into().unwrap());
        if raw == 0 {
            return Err(Error::format(at as u64, format!("dim {axis} is zero")));
        }
        let d = usize::try_from(raw)
            .ok()
            .filter(|d| {
                numel
                    .checked_mul(*d)
                    .and_then(|n| n.checked_mul(dtype.elem_size()))
                    .is_some()
            })
            .ok_or_else(|| Error::format(at as u64, "dims overflow"))?;
        numel *= d;
        shape.push(d);
    }

    let start = HEADER_FIXED + 8 * ndim;
    let payload_len = numel * dtype.elem_size();
    let expected_end = start
        .checked_add(payload_len)
        .ok_or_else(|| Error::format(HEADER_FIXED as u64, "dims overflow"))?;
    if bytes.len() < expected_end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: need {payload_len} bytes after header"),
        ));
    }
    if bytes.len() > expected_end {
        return Err(Error::format(
            expected_end as u64,
            "trailing bytes after payload",
        ));
    }

    let payload = &bytes[start..expected_end];
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F64 => {
            for c in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
        Dtype::F32 => {
            for c in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
            }
        }
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            (start + i * dtype.elem_size()) as u64,
            "non-finite value in payload",
        ));
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

/// Writes `t` as f64.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F64)
}

pub fn write_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn offset_of(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn small_round_trip_and_layout() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&t, Dtype::F64).unwrap();
        assert_eq!(&bytes[..4], b"VSCN");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 2]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 16 + 32);
        assert_eq!(decode_tensor(&bytes).unwrap(), (t, Dtype::F64));
    }

    #[test]
    fn f32_round_trip_quantizes() {
        let t = Tensor::vector(vec![0.1, -2.5, 1e10]).unwrap();
        let bytes = encode_tensor(&t, Dtype::F32).unwrap();
        assert_eq!(bytes.len(), 8 + 8 + 12);
        let (back, dtype) = decode_tensor(&bytes).unwrap();
        assert_eq!(dtype, Dtype::F32);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*b, (*a as f32) as f64);
        }
        let huge = Tensor::vector(vec![1e300]).unwrap();
        assert!(encode_tensor(&huge, Dtype::F32).is_err());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let t = Tensor::vector(vec![1.0]).unwrap();
        let mut bytes = encode_tensor(&t, Dtype::F64).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(offset_of(decode_tensor(&bytes).unwrap_err()), 0);
    }

    #[test]
    fn header_errors_name_their_offset() {
        let t = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let good = encode_tensor(&t, Dtype::F64).unwrap();

        let mut b = good.clone();
        b[4] = 9;
        assert_eq!(offset_of(decode_tensor(&b).unwrap_err()), 4);

        let mut b = good.clone();
        b[6] = 7;
        assert_eq!(offset_of(decode_tensor(&b).unwrap_err()), 6);

        let mut b = good.clone();
        b[7] = 0;
        assert_eq!(offset_of(decode_tensor(&b).unwrap_err()), 7);

        let mut b = good.clone();
        b[16..24].copy_from_slice(&0u64.to_le_bytes());
        assert_eq!(offset_of(decode_tensor(&b).unwrap_err()), 16);

        let mut b = good.clone();
        b[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(offset_of(decode_tensor(&b).unwrap_err()), 16);

        let b = &good[..good.len() - 3];
        assert_eq!(offset_of(decode_tensor(b).unwrap_err()), b.len() as u64);

        let mut b = good.clone();
        b.push(0);
        assert_eq!(offset_of(decode_tensor(&b).unwrap_err()), good.len() as u64);

        let mut b = good.clone();
        b[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(offset_of(decode_tensor(&b).unwrap_err()), 24);

        assert_eq!(offset_of(decode_tensor(b"VS").unwrap_err()), 2);
    }

    #[test]
    fn zero_dim_never_reaches_the_writer() {
        assert!(Tensor::new(vec![3, 0], vec![]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vscn");
        let t = Tensor::new(vec![2, 1, 3], (0..6).map(|v| v as f64 * 0.25).collect()).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert!(matches!(
            read_tensor(dir.path().join("missing.vscn")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in prop::collection::vec(-1e12f64..1e12, 64),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| seed[i % seed.len()] / (i as f64 + 1.0)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let (back, _) = decode_tensor(&encode_tensor(&t, Dtype::F64).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
