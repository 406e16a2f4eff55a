//! Named parameter storage and the binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OFKT1"
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank x u64 dims
//!   prod(dims) x f64
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OFKT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps leaves created elsewhere, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Registers every parameter as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, value) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a checkpoint into `(name, tensor)` records in file order.
    pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::Checkpoint("bad magic".into()))?;
        let mut r = Reader { buf: rest, pos: 0 };
        let mut records = Vec::new();
        while r.pos < r.buf.len() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            records.push((name, Tensor::new(&dims, data)?));
        }
        Ok(records)
    }

    /// Overwrites parameter values from a checkpoint; names and shapes must
    /// match this store exactly.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let records = Self::decode(bytes)?;
        if records.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                records.len(),
                self.len()
            )));
        }
        for (name, value) in records {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", name)))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, model expects {:?}",
                    name,
                    value.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0));
        s.add("b", Tensor::scalar(std::f64::consts::PI));
        s
    }

    #[test]
    fn byte_layout() {
        let bytes = store().to_bytes();
        assert_eq!(&bytes[..5], b"OFKT1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 8);
        assert_eq!(&bytes[9..17], b"a.weight");
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[21..29].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[29..37].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[37..45].try_into().unwrap()), -1.0);
    }

    #[test]
    fn load_round_trip_and_mismatch() {
        let src = store();
        let mut dst = ParamStore::new();
        dst.add("a.weight", Tensor::zeros(&[2, 3]));
        dst.add("b", Tensor::scalar(0.0));
        dst.load_bytes(&src.to_bytes()).unwrap();
        assert_eq!(dst.get(ParamId(0)), src.get(ParamId(0)));
        assert_eq!(dst.get(ParamId(1)).item(), Some(std::f64::consts::PI));

        let mut wrong = ParamStore::new();
        wrong.add("a.weight", Tensor::zeros(&[3, 2]));
        wrong.add("b", Tensor::scalar(0.0));
        assert!(matches!(wrong.load_bytes(&src.to_bytes()), Err(Error::Checkpoint(_))));
        assert!(dst.load_bytes(b"NOPE1").is_err());
        let mut truncated = src.to_bytes();
        truncated.truncate(truncated.len() - 3);
        assert!(dst.load_bytes(&truncated).is_err());
    }
}
