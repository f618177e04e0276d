//! Binary checkpoint format.
//!
//! ```text
//! "MLV1" | version u32 | entry count u32 |
//!   per entry: name length u32 | UTF-8 name | dtype u32 (0 = f32, 1 = f64)
//!              | rank u32 | dims u64 x rank | row-major little-endian payload
//! ```
//! All integers are little-endian.

use std::path::Path;

use super::array::{DType, DenseArray, Real};
use super::params::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLV1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One stored array, still in its on-disk precision (widened to f64).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl<T: Real> ParamStore<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * T::DTYPE.width());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, value) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
            out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in value.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Builds a store from checkpoint bytes, converting precision if needed.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = decode(bytes)?;
        let mut store = ParamStore::new();
        for e in entries {
            let data = e.data.into_iter().map(T::lit).collect();
            store.insert(&e.name, DenseArray::from_vec(&e.shape, data)?)?;
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let code = r.u32("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code} for `{name}`")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len * dtype.width(), "payload")?;
        let data = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => payload.chunks_exact(8).map(f64::read_le).collect(),
        };
        entries.push(CheckpointEntry { name, dtype, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, store.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ParamStore::from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let mut s = ParamStore::<f32>::new();
        s.insert("ab", DenseArray::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = s.to_checkpoint_bytes();
        let mut expected = b"MLV1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&0u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corruption() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", DenseArray::from_vec(&[1, 2], vec![0.5, 0.25]).unwrap()).unwrap();
        let bytes = s.to_checkpoint_bytes();
        assert!(ParamStore::<f64>::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::<f64>::from_checkpoint_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ParamStore::<f64>::from_checkpoint_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..5) {
            let mut s = ParamStore::<f64>::new();
            for (i, chunk) in values.chunks(split).enumerate() {
                s.insert(&format!("p{i}.w"), DenseArray::from_vec(&[chunk.len()], chunk.to_vec()).unwrap()).unwrap();
            }
            let bytes = s.to_checkpoint_bytes();
            let back = ParamStore::<f64>::from_checkpoint_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_checkpoint_bytes(), bytes);
        }
    }
}
