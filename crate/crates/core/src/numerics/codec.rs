//! Binary tensor format.
//!
//! Layout, all little-endian: magic `SPXT`, `u32` version (1), `u8` dtype
//! (0 = f32), `u8` ndim (2), two `u64` dims, then the row-major `f32`
//! payload. Values are held as `f64` in memory and narrowed on write, so a
//! round trip is bit-exact for any matrix whose entries are representable
//! in `f32`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Matrix;

pub const MAGIC: [u8; 4] = *b"SPXT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 8 + 8;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"SPXT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("expected a rank-2 tensor, found rank {0}")]
    BadRank(u8),
    #[error("truncated tensor: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },
    #[error("shape {rows}x{cols} overflows addressable size")]
    ShapeOverflow { rows: u64, cols: u64 },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("value {value} at ({row}, {col}) does not fit in f32")]
    OutOfRange { row: usize, col: usize, value: f64 },
}

/// Serializes a matrix to bytes.
pub fn encode(m: &Matrix) -> Result<Vec<u8>, CodecError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(2);
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    let cols = m.cols().max(1);
    for (i, &v) in m.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(CodecError::OutOfRange {
                row: i / cols,
                col: i % cols,
                value: v,
            });
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    Ok(buf)
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Matrix, CodecError> {
    let found = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN as u64,
            found,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CodecError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN as u64,
            found,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(CodecError::UnsupportedDtype(bytes[8]));
    }
    if bytes[9] != 2 {
        return Err(CodecError::BadRank(bytes[9]));
    }
    let rows = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(CodecError::ShapeOverflow { rows, cols })?;
    if found < payload {
        return Err(CodecError::Truncated {
            needed: payload,
            found,
        });
    }
    if found > payload {
        return Err(CodecError::TrailingBytes(found - payload));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::new(rows, cols, data).map_err(|_| {
        let pos = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .position(|c| !f32::from_le_bytes(c.try_into().unwrap()).is_finite())
            .unwrap_or(0);
        CodecError::NonFinite {
            row: pos / cols.max(1),
            col: pos % cols.max(1),
        }
    })
}

pub fn write_tensor(m: &Matrix, path: impl AsRef<Path>) -> Result<(), CodecError> {
    let path = path.as_ref();
    let bytes = encode(m)?;
    let io = |source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix, CodecError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Rounds every entry to the nearest `f32`, i.e. what a write/read cycle
/// would return.
pub fn round_to_f32(m: &Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip() {
        let m = Matrix::zeros(2, 3);
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn scalar_round_trip_bit_exact() {
        let m = Matrix::from_rows(&[[3.5]]);
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back.get(0, 0).to_bits(), 3.5f64.to_bits());
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&Matrix::from_rows(&[[1.0, 2.0]])).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CodecError::BadMagic { .. })));

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(CodecError::Truncated { .. })
        ));

        let mut huge = good.clone();
        huge[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        huge[18..26].copy_from_slice(&2u64.to_le_bytes());
        assert!(matches!(
            decode(&huge),
            Err(CodecError::ShapeOverflow { .. })
        ));

        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(CodecError::UnsupportedVersion(2))));

        let mut d = good.clone();
        d[8] = 1;
        assert!(matches!(decode(&d), Err(CodecError::UnsupportedDtype(1))));

        let mut r = good.clone();
        r[9] = 3;
        assert!(matches!(decode(&r), Err(CodecError::BadRank(3))));

        let mut t = good.clone();
        t.push(0);
        assert!(matches!(decode(&t), Err(CodecError::TrailingBytes(1))));

        let mut nan = good;
        nan[26..30].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode(&nan),
            Err(CodecError::NonFinite { row: 0, col: 0 })
        ));
    }

    #[test]
    fn refuses_values_beyond_f32() {
        let m = Matrix::from_rows(&[[1e300]]);
        assert!(matches!(encode(&m), Err(CodecError::OutOfRange { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spxt");
        let m = Matrix::from_rows(&[[1.25, -2.0], [0.0, 7.5]]);
        write_tensor(&m, &p).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), m);
        assert!(matches!(
            read_tensor(dir.path().join("missing")),
            Err(CodecError::Io { .. })
        ));
    }
}
