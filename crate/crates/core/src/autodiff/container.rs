//! Binary named-tensor container.
//!
//! Layout (all integers little-endian):
//! `u8 version | u32 count | { u32 name_len | name | u8 rank | u64 dim × rank | f64 × numel }*`

use super::tensor::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u8 = 1;

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut out = vec![CONTAINER_VERSION];
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
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
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated container at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a container; returns the store and the number of bytes consumed.
pub fn decode_prefix(buf: &[u8]) -> Result<(ParameterStore, usize)> {
    let mut r = Reader { buf, pos: 0 };
    let version = r.u8()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {version} (expected {CONTAINER_VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad shape".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.insert(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok((store, r.pos))
}

pub fn decode(buf: &[u8]) -> Result<ParameterStore> {
    let (store, used) = decode_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - used)));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::seed::rng(&[seed]);
            let mut store = ParameterStore::new();
            store.insert("a.w", Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()).unwrap();
            store.insert("b", Tensor::scalar(rng.gen())).unwrap();
            let back = decode(&encode(&store)).unwrap();
            for (name, t) in store.iter() {
                let u = back.get(name).unwrap();
                prop_assert_eq!(t.shape(), u.shape());
                for (x, y) in t.data().iter().zip(u.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode(&ParameterStore::new());
        bytes[0] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn truncation_is_rejected() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::zeros(&[3, 3])).unwrap();
        let bytes = encode(&store);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
