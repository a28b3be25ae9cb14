//! GFF container: a little-endian header followed by an `f32` payload.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GFF1"
//! 4       4     u32 frames (L)
//! 8       4     u32 rows (h)
//! 12      4     u32 cols (w)
//! 16      4     u32 channels (c)
//! 20      1     u8 dtype, 0 = f32
//! 21      3     padding, zero
//! 24      ...   L·h·w·c values, raster order (frame, row, col, channel)
//! ```

use std::path::Path;

use crate::error::{Error, FormatError, Result, WithPath};
use crate::tensor::Tensor4;

pub const MAGIC: [u8; 4] = *b"GFF1";
pub const HEADER_LEN: usize = 24;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub frames: u32,
    pub rows: u32,
    pub cols: u32,
    pub channels: u32,
    pub dtype: u8,
}

impl Header {
    pub fn for_tensor(t: &Tensor4) -> Result<Self> {
        let (n, h, w, c) = t.dims();
        let conv = |v: usize| u32::try_from(v).map_err(|_| Error::shape(format!("dimension {v} exceeds u32")));
        Ok(Header { frames: conv(n)?, rows: conv(h)?, cols: conv(w)?, channels: conv(c)?, dtype: DTYPE_F32 })
    }

    fn dims(&self) -> Vec<u64> {
        vec![self.frames as u64, self.rows as u64, self.cols as u64, self.channels as u64]
    }

    /// Number of payload values, checked against overflow.
    pub fn element_count(&self) -> Result<usize, FormatError> {
        let dims = self.dims();
        if dims.contains(&0) {
            return Err(FormatError::ZeroDim { dims });
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
            .filter(|n| n.checked_mul(4).and_then(|b| b.checked_add(HEADER_LEN)).is_some())
            .ok_or(FormatError::DimOverflow { dims })
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedHeader { need: HEADER_LEN, have: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic, expected: MAGIC });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader { need: HEADER_LEN, have: bytes.len() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let header =
        Header { frames: u32_at(4), rows: u32_at(8), cols: u32_at(12), channels: u32_at(16), dtype: bytes[20] };
    if header.dtype != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(header.dtype));
    }
    Ok(header)
}

/// Decode a complete container. Rejects short or over-long payloads and
/// non-finite values.
pub fn decode(bytes: &[u8]) -> Result<Tensor4, FormatError> {
    let header = decode_header(bytes)?;
    let count = header.element_count()?;
    let need = HEADER_LEN + count * 4;
    if bytes.len() < need {
        return Err(FormatError::TruncatedPayload { need, have: bytes.len() });
    }
    if bytes.len() > need {
        return Err(FormatError::TrailingBytes { extra: bytes.len() - need });
    }
    let mut data = Vec::with_capacity(count);
    for (index, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite { index });
        }
        data.push(v as f64);
    }
    let dims = (header.frames as usize, header.rows as usize, header.cols as usize, header.channels as usize);
    Ok(Tensor4::from_vec(dims, data).expect("length and finiteness checked"))
}

/// Encode with values rounded to `f32`.
pub fn encode(t: &Tensor4) -> Result<Vec<u8>> {
    let header = Header::for_tensor(t)?;
    let mut out = Vec::with_capacity(HEADER_LEN + t.data().len() * 4);
    out.extend_from_slice(&MAGIC);
    for v in [header.frames, header.rows, header.cols, header.channels] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&[DTYPE_F32, 0, 0, 0]);
    for (index, &v) in t.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(FormatError::NonFinite { index }.into());
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Tensor4> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(Error::from).at_path(path)
}

pub fn write(path: &Path, t: &Tensor4) -> Result<()> {
    let bytes = encode(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header_bytes(magic: &[u8; 4], dims: [u32; 4], dtype: u8) -> Vec<u8> {
        let mut b = magic.to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&[dtype, 0, 0, 0]);
        b
    }

    #[test]
    fn minimal_zero_file() {
        let mut bytes = header_bytes(b"GFF1", [1, 2, 2, 4], 0);
        bytes.extend(std::iter::repeat(0u8).take(16 * 4));
        let t = decode(&bytes).unwrap();
        assert_eq!(t.dims(), (1, 2, 2, 4));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_diagnostics() {
        let mut bad = header_bytes(b"XXXX", [1, 1, 1, 1], 0);
        bad.extend_from_slice(&[0; 4]);
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic { .. })));

        assert!(matches!(decode(b"GFF1\x01"), Err(FormatError::TruncatedHeader { .. })));

        let big = header_bytes(b"GFF1", [u32::MAX, u32::MAX, u32::MAX, u32::MAX], 0);
        assert!(matches!(decode(&big), Err(FormatError::DimOverflow { .. })));
        // The payload size fits but the file size does not.
        let edge = header_bytes(b"GFF1", [4, (1 << 30) - 1, (1 << 30) + 1, 1], 0);
        assert!(matches!(decode(&edge), Err(FormatError::DimOverflow { .. })));

        let zero = header_bytes(b"GFF1", [1, 0, 2, 2], 0);
        assert!(matches!(decode(&zero), Err(FormatError::ZeroDim { .. })));

        let mut short = header_bytes(b"GFF1", [1, 2, 2, 1], 0);
        short.extend_from_slice(&[0; 12]);
        assert!(matches!(decode(&short), Err(FormatError::TruncatedPayload { need: 40, have: 36 })));

        let mut long = header_bytes(b"GFF1", [1, 1, 1, 1], 0);
        long.extend_from_slice(&[0; 5]);
        assert!(matches!(decode(&long), Err(FormatError::TrailingBytes { extra: 1 })));

        let mut nan = header_bytes(b"GFF1", [1, 1, 1, 2], 0);
        nan.extend_from_slice(&1.0f32.to_le_bytes());
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&nan), Err(FormatError::NonFinite { index: 1 })));

        let dtype = header_bytes(b"GFF1", [1, 1, 1, 1], 7);
        assert!(matches!(decode(&dtype), Err(FormatError::UnsupportedDtype(7))));
    }

    #[test]
    fn file_round_trip_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gff");
        let t = Tensor4::from_fn((2, 3, 2, 2), |n, y, x, c| (n + 2 * y + 3 * x) as f64 - c as f64 * 0.5);
        write(&path, &t).unwrap();
        assert_eq!(read(&path).unwrap(), t);
        std::fs::write(&path, b"XXXXnothing").unwrap();
        let err = read(&path).unwrap_err().to_string();
        assert!(err.contains("x.gff") && err.contains("bad magic"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in (1usize..4, 1usize..5, 1usize..5, 1usize..5),
            seed in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..400),
        ) {
            let (n, h, w, c) = dims;
            let len = n * h * w * c;
            let data: Vec<f64> = (0..len).map(|i| seed[i % seed.len()] as f64).collect();
            let t = Tensor4::from_vec(dims, data).unwrap();
            let bytes = encode(&t).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
