//! `PTKT` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                              |
//! |--------------|--------------------------------------|
//! | 4            | magic `PTKT`                         |
//! | 1            | version, currently `1`               |
//! | 4            | rank `r` (`u32`)                     |
//! | 4·r          | dims (`u32` each)                    |
//! | 4·Π dims     | values, row-major IEEE-754 `f32`     |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTKT";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                offset: self.bytes.len() as u64,
                missing: (n - available) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}"),
        });
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version });
    }
    let rank = cur.u32()? as usize;
    // Guard against absurd ranks before allocating.
    if rank > 32 {
        return Err(Error::Format {
            offset: 5,
            msg: format!("rank {rank} exceeds limit of 32"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let dims_end = cur.pos as u64;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|c| c.checked_mul(4).map(|_| c))
        .ok_or_else(|| Error::Format {
            offset: 9,
            msg: format!("dims {shape:?} overflow"),
        })?;
    let raw = cur.take(count * 4)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: format!(
                "{} trailing byte(s) after {count} values (dims end at byte {dims_end})",
                bytes.len() - cur.pos
            ),
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let mut expected = b"PTKT".to_vec();
        expected.push(1);
        expected.extend_from_slice(&[2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncation_reports_missing_bytes() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t);
        let err = decode(&bytes[..bytes.len() - 6]).unwrap_err();
        match err {
            Error::Truncated { missing, .. } => assert_eq!(missing, 6),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode(&bytes[..3]), Err(Error::Truncated { missing: 1, .. })));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = encode(&Tensor::scalar(1.0));
        bytes[4] = 2;
        assert!(matches!(
            decode(&bytes),
            Err(Error::UnsupportedVersion { found: 2 })
        ));
        bytes[4] = 1;
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&Tensor::scalar(1.0));
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(0usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
