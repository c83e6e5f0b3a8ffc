//! Binary checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "G2PCKPT\0"
//! version    u32      currently 1
//! meta_len   u64      length of the metadata blob
//! meta       bytes    UTF-8 JSON (model config, vocabulary, topology, ...)
//! count      u32      number of parameter arrays
//! per array:
//!   name_len u32, name UTF-8 bytes
//!   ndims    u32, dims u64 × ndims
//!   values   f64 × product(dims), IEEE-754 bit patterns
//! ```

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"G2PCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(metadata: &str, params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + metadata.len() + params.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    buf.extend_from_slice(metadata.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndims = r.u32()? as usize;
        let shape = (0..ndims)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes_needed = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("array size overflow".into()))?;
        let raw = r.take(bytes_needed)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((meta, store))
}

pub fn save(path: impl AsRef<Path>, metadata: &str, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(metadata, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(String, ParamStore)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            meta in "[a-z{}\":,0-9 ]{0,40}",
        ) {
            let mut store = ParamStore::new();
            store.add("w", Tensor::new(vec![values.len()], values.clone()).unwrap());
            store.add("b.bias", Tensor::zeros(&[2, 3]));
            let (m2, s2) = decode(&encode(&meta, &store)).unwrap();
            prop_assert_eq!(m2, meta);
            prop_assert_eq!(s2.names(), store.names());
            for (a, b) in s2.tensors().iter().zip(store.tensors()) {
                prop_assert_eq!(a.shape(), b.shape());
                let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3]));
        let bytes = encode("{}", &store);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
