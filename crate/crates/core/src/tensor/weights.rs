//! Little-endian weight files.
//!
//! Layout: the magic `APFN`, a `u32` format version, then one record per
//! tensor until end of file: `u32` name length, UTF-8 name, `u32` rank,
//! `rank` extents as `u32`, and the data as raw `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"APFN";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for e in t.shape() {
            out.extend_from_slice(&(*e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {} (need {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<ParamStore<T>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic, expected APFN".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| format!("record name is not UTF-8: {e}"))?
            .to_string();
        let rank = r.u32()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(format!("{name}: rank {rank} outside 1..=4"));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<std::result::Result<_, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        if store.find(&name).is_some() {
            return Err(format!("duplicate record {name}"));
        }
        store.add(name, Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?);
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(store))?;
    f.sync_all()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|detail| Error::WeightFormat { path: path.to_path_buf(), detail })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_roundtrip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..=4), 0..5), seed in 0u32..1000) {
            let mut store = ParamStore::<f32>::new();
            for (i, s) in shapes.iter().enumerate() {
                let n: usize = s.iter().product();
                let data = (0..n).map(|k| ((k as u32 * 31 + seed) % 97) as f32 * 0.125 - 3.0).collect();
                store.add(format!("layer{i}.weight"), Tensor::from_vec(s, data).unwrap());
            }
            let back: ParamStore<f32> = decode(&encode(&store)).unwrap();
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut store = ParamStore::<f32>::new();
        store.add("b", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let bytes = encode(&store);
        assert_eq!(&bytes[..4], b"APFN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..13], b"b");
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode::<f32>(b"NOPE\x01\0\0\0").is_err());
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[3]));
        let bytes = encode(&store);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
