//! Binary checkpoint format.
//!
//! ```text
//! magic    4 bytes   "MXSH"
//! version  u32 LE    FORMAT_VERSION
//! count    u64 LE    number of records
//! record × count:
//!   name_len u32 LE
//!   name     name_len bytes, UTF-8
//!   rank     u32 LE
//!   dims     rank × u64 LE
//!   payload  product(dims) × f64 LE
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MXSH";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u64("record count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{name}: dims overflow")))?;
        let payload = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format(format!("{name}: payload overflow")))?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.5, -0.25]).unwrap();
        let bytes = encode([("ab", &t)]);
        assert_eq!(&bytes[..4], b"MXSH");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..22], b"ab");
        assert_eq!(&bytes[22..26], &1u32.to_le_bytes());
        assert_eq!(&bytes[26..34], &2u64.to_le_bytes());
        assert_eq!(&bytes[34..42], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 50);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE\x01\0\0\0").is_err());
        let t = Tensor::ones(&[3]);
        let bytes = encode([("x", &t)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            records in prop::collection::vec(
                ("[a-z0-9._]{1,12}", prop::collection::vec(1usize..4, 0..4), any::<u64>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = records
                .iter()
                .enumerate()
                .map(|(i, (name, shape, bits))| {
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|j| f64::from_bits(bits.wrapping_mul(j as u64 + 1).rotate_left(j as u32)))
                        .map(|v| if v.is_nan() { 0.0 } else { v })
                        .collect();
                    (format!("{name}{i}"), Tensor::new(shape.clone(), data).unwrap())
                })
                .collect();
            let bytes = encode(tensors.iter().map(|(n, t)| (n.as_str(), t)));
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n0, n1);
                prop_assert_eq!(t0.shape(), t1.shape());
                let b0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b0, b1);
            }
        }
    }
}
