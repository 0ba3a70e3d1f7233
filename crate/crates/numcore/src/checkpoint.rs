//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "NSTCKPT\0"
//! version  u32
//! meta     u32 count, then (str key, str value)*
//! sections u32 count, then (str name, u32 count, tensor*)*
//! tensor   str path, u32 rank, u64 dim*, f64 value*
//! str      u32 byte length, UTF-8 bytes
//! ```
//!
//! Sections and entries are written in sorted order, so identical state
//! always serializes to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::{ParamStore, TensorMap};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NSTCKPT\0";
pub const VERSION: u32 = 1;

pub const PARAMS: &str = "params";
pub const EMA: &str = "ema";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub sections: BTreeMap<String, TensorMap>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamStore) -> Self {
        let mut c = Checkpoint::default();
        c.sections.insert(PARAMS.into(), params.as_map().clone());
        c
    }

    pub fn params(&self) -> Result<ParamStore> {
        self.sections
            .get(PARAMS)
            .cloned()
            .map(ParamStore::from_map)
            .ok_or_else(|| NumError::Missing(PARAMS.into()))
    }

    pub fn section(&self, name: &str) -> Option<&TensorMap> {
        self.sections.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, tensors) in &self.sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for (path, t) in tensors {
                put_str(&mut out, path);
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(NumError::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NumError::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.count(8)? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut sections = BTreeMap::new();
        for _ in 0..r.count(8)? {
            let name = r.string()?;
            let mut tensors = TensorMap::new();
            for _ in 0..r.count(8)? {
                let path = r.string()?;
                let t = r.tensor()?;
                if tensors.insert(path.clone(), t).is_some() {
                    return Err(NumError::format(format!("duplicate tensor path {path}")));
                }
            }
            if sections.insert(name.clone(), tensors).is_some() {
                return Err(NumError::format(format!("duplicate section {name}")));
            }
        }
        if !r.is_empty() {
            return Err(NumError::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { metadata, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Bounds-checked little-endian cursor shared by the binary decoders.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(NumError::format(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A u32 element count whose elements occupy at least `min_elem_bytes`
    /// each; rejects counts the remaining input cannot possibly hold.
    pub fn count(&mut self, min_elem_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem_bytes.max(1)) > self.remaining() {
            return Err(NumError::format(format!(
                "count {n} exceeds remaining input"
            )));
        }
        Ok(n)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| NumError::format("invalid UTF-8 string"))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.count(8)?;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d =
                usize::try_from(self.u64()?).map_err(|_| NumError::format("dimension overflow"))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| NumError::format("tensor size overflow"))?;
            shape.push(d);
        }
        if numel.saturating_mul(8) > self.remaining() {
            return Err(NumError::format("tensor payload exceeds remaining input"));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.insert(
            "feature_encoder/conv1/weight",
            Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 / 7.0),
        );
        p.insert(
            "decoder/embedding",
            Tensor::from_fn(&[4, 3], |i| -(i as f64)),
        );
        let mut c = Checkpoint::from_params(&p);
        c.metadata.insert("kind".into(), "pretrain".into());
        let mut opt = TensorMap::new();
        opt.insert("step".into(), Tensor::scalar(12.0));
        c.sections.insert("optimizer/encoder".into(), opt);
        c
    }

    #[test]
    fn bytes_round_trip_and_are_stable() {
        let c = sample();
        let b = c.to_bytes();
        assert_eq!(b, sample().to_bytes());
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let b = sample().to_bytes();
        for cut in [0, 7, 12, b.len() / 2, b.len() - 1] {
            assert!(Checkpoint::from_bytes(&b[..cut]).is_err());
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut huge = MAGIC.to_vec();
        huge.extend_from_slice(&VERSION.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&huge).is_err());
    }
}
