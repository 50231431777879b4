//! Binary weight archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LPAT"  u16 version (=1)  u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank × u32 dims,
//!             u8 dtype (0 = f32, 1 = f64), raw little-endian payload
//! ```
//!
//! Tensors are written in name order, so saving the same parameters always
//! yields the same bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{DType, Storable, Tensor};

pub const MAGIC: &[u8; 4] = b"LPAT";
pub const VERSION: u16 = 1;

pub fn encode<T: Storable>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(params.len()).map_err(|_| Error::Archive("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Archive(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Archive(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Archive(format!("dimension too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Decodes an archive whose payload dtype must match `T`.
pub fn decode<T: Storable>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Archive(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Archive(format!("unknown dtype tag {tag} for {name}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Archive(format!(
                "{name} is stored as {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * dtype.size())?;
        let data = payload.chunks(dtype.size()).map(T::read_le).collect();
        let t =
            Tensor::new(&shape, data).map_err(|e| Error::Archive(format!("tensor {name}: {e}")))?;
        if params.contains(&name) {
            return Err(Error::Archive(format!("duplicate tensor {name}")));
        }
        params.insert(name, t);
    }
    if r.at != bytes.len() {
        return Err(Error::Archive(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    Ok(params)
}

/// Reads only the dtype of the first tensor, if any.
pub fn peek_dtype(bytes: &[u8]) -> Result<Option<DType>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    r.u16()?;
    if r.u32()? == 0 {
        return Ok(None);
    }
    let len = r.u16()? as usize;
    r.take(len)?;
    let rank = r.u8()? as usize;
    r.take(rank * 4)?;
    let tag = r.u8()?;
    Ok(DType::from_tag(tag))
}

pub fn save<T: Storable>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load<T: Storable>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ModelParams<f32> {
        let mut p = ModelParams::new();
        p.insert("b", Tensor::new(&[2], vec![1.5, -0.0]).unwrap());
        p.insert("a.weight", Tensor::from_fn(&[2, 1, 3], |i| i as f32 * 0.25));
        p
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"LPAT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        // first tensor in name order is "a.weight"
        assert_eq!(&bytes[10..12], &[8, 0]);
        assert_eq!(&bytes[12..20], b"a.weight");
        assert_eq!(bytes[20], 3);
        assert_eq!(&bytes[21..33], &[2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes[33], 0);
        assert_eq!(peek_dtype(&bytes).unwrap(), Some(DType::F32));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Archive(_))));
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(
            tensors in proptest::collection::btree_map(
                "[a-z][a-z0-9_.]{0,12}",
                (proptest::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..6,
            )
        ) {
            let mut p = ModelParams::<f64>::new();
            for (name, (shape, seed)) in tensors {
                let mut s = seed;
                p.insert(name, Tensor::from_fn(&shape, |_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(s >> 2)
                }));
            }
            let bytes = encode(&p).unwrap();
            let back = decode::<f64>(&bytes).unwrap();
            prop_assert!(back.bit_eq(&p));
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
