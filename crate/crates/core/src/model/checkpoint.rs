//! Binary parameter checkpoints.
//!
//! Layout: `SAHRCKPT`, a version byte, a little-endian `u32` entry count, then
//! one manifest entry per parameter (`u16` name length, UTF-8 name, `u8`
//! rank, `u64` extents, `u64` absolute byte offset of the data), then the raw
//! little-endian `f64` values of every parameter in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAHRCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let count = u32::try_from(store.len()).map_err(|_| bad("too many parameters"))?;
    let mut header_len = CHECKPOINT_MAGIC.len() + 1 + 4;
    for (name, t) in store.iter() {
        header_len += 2 + name.len() + 1 + 8 * t.shape().len() + 8;
    }
    let mut out = Vec::with_capacity(header_len + 8 * store.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    let mut offset = header_len as u64;
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("parameter name `{name}` too long")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| bad(format!("parameter `{name}` has too many axes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    debug_assert_eq!(out.len(), header_len);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("missing SAHRCKPT magic"));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    let mut manifest = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let mut store = ParamStore::new();
    for (name, shape, offset) in manifest {
        let numel: usize = shape.iter().product();
        let mut data_reader = Reader { bytes, pos: offset };
        let raw = data_reader.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("parameter `{name}`: {e}")))?;
        if store.id(&name).is_some() {
            return Err(bad(format!("duplicate parameter `{name}`")));
        }
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(&[2, 3], vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 1e300, -0.0, 7.0]).unwrap());
        s.insert("a.b", Tensor::new(&[3], vec![1.0 / 3.0, 2.0, -1.0]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode_checkpoint(&s).unwrap();
        assert_eq!(&bytes[..8], b"SAHRCKPT");
        let back: ParamStore<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f64>(b"ATTNDMP1").is_err());
    }
}
