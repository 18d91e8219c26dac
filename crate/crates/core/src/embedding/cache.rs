//! Binary embedding cache, little-endian:
//!
//! ```text
//! "MQSB" | version u32 | N u64 | D u32 | normalized u8
//! N x (u16 byte length + UTF-8 id)
//! N*D f32, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::{EmbeddingError, EmbeddingMatrix};

pub const CACHE_MAGIC: [u8; 4] = *b"MQSB";
pub const CACHE_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1;

pub fn write_cache(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    encode(matrix, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn encode<W: Write>(matrix: &EmbeddingMatrix, out: &mut W) -> Result<(), EmbeddingError> {
    out.write_all(&CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(matrix.len() as u64).to_le_bytes())?;
    out.write_all(&(matrix.dim() as u32).to_le_bytes())?;
    out.write_all(&[matrix.normalized() as u8])?;
    for id in matrix.ids() {
        let len = u16::try_from(id.len()).map_err(|_| EmbeddingError::IdTooLong(id.clone()))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(id.as_bytes())?;
    }
    for v in matrix.data().iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbeddingError> {
    decode(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    expected: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        if self.bytes.len() - self.pos < n {
            return Err(EmbeddingError::TruncatedFile {
                expected: self.expected.max((self.pos + n) as u64),
                found: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        expected: HEADER_LEN as u64,
    };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != CACHE_MAGIC {
        return Err(EmbeddingError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(EmbeddingError::VersionUnsupported(version));
    }
    let n = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let d = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as u64;
    let normalized = cur.take(1)?[0] != 0;

    // Lower bound until the id section is known: empty ids plus the data.
    cur.expected = HEADER_LEN as u64 + n.saturating_mul(2) + n.saturating_mul(d).saturating_mul(4);
    if (bytes.len() as u64) < cur.expected {
        return Err(EmbeddingError::TruncatedFile {
            expected: cur.expected,
            found: bytes.len() as u64,
        });
    }
    let mut ids = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        cur.expected += len as u64;
        let raw = cur.take(len)?;
        ids.push(String::from_utf8(raw.to_vec()).map_err(|_| EmbeddingError::CorruptId)?);
    }
    let expected = cur.pos as u64 + n * d * 4;
    if bytes.len() as u64 != expected {
        return Err(EmbeddingError::TruncatedFile {
            expected,
            found: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes[cur.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((n as usize, d as usize), values).expect("length checked");
    EmbeddingMatrix::new(ids, data, normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            vec!["a".into(), "é-2".into()],
            ndarray::array![[0.6f32, 0.8], [f32::MIN_POSITIVE, -0.0]],
            true,
        )
        .unwrap()
    }

    fn bytes(m: &EmbeddingMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        encode(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn layout_is_stable() {
        let buf = bytes(&sample());
        assert_eq!(&buf[..4], b"MQSB");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(buf[20], 1);
        assert_eq!(u16::from_le_bytes([buf[21], buf[22]]), 1);
        assert_eq!(buf[23], b'a');
        assert_eq!(buf.len(), 21 + (2 + 1) + (2 + 4) + 16);
    }

    #[test]
    fn bad_magic() {
        let mut buf = bytes(&sample());
        buf[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&buf), Err(EmbeddingError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn bad_version() {
        let mut buf = bytes(&sample());
        buf[4] = 9;
        assert!(matches!(decode(&buf), Err(EmbeddingError::VersionUnsupported(9))));
    }

    #[test]
    fn missing_row_is_truncation() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let m = EmbeddingMatrix::new(ids, Array2::ones((10, 3)), false).unwrap();
        let buf = bytes(&m);
        let short = &buf[..buf.len() - 3 * 4];
        assert!(matches!(decode(short), Err(EmbeddingError::TruncatedFile { .. })));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(EmbeddingError::TruncatedFile { .. })));
        assert!(matches!(decode(&buf[..7]), Err(EmbeddingError::TruncatedFile { .. })));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mqsb");
        write_cache(&sample(), &path).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(bytes(&back), bytes(&sample()));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_identical(n in 0usize..6, d in 1usize..5,
                                      bits in proptest::collection::vec(any::<u32>(), 30),
                                      normalized in any::<bool>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
            let values: Vec<f32> = (0..n * d).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
            let m = EmbeddingMatrix::new(ids, Array2::from_shape_vec((n, d), values).unwrap(), normalized).unwrap();
            let buf = bytes(&m);
            let back = decode(&buf).unwrap();
            prop_assert_eq!(back.ids(), m.ids());
            prop_assert_eq!(back.normalized(), normalized);
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = m.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(bytes(&back), buf);
        }
    }
}
