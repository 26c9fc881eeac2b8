//! `UHKDCKPT` checkpoints, little-endian:
//!
//! ```text
//! magic    8 bytes  "UHKDCKPT"
//! version  u32      1
//! count    u32
//! count x { u16 path length, UTF-8 path, u32 rank, u64 extents[rank], f64 data }
//! crc32    u32      over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::tensor::Tensor;
use crate::zoo::{Model, ModelSpec};

pub const MAGIC: &[u8; 8] = b"UHKDCKPT";
pub const VERSION: u32 = 1;
pub const SPEC_PATH: &str = "meta.spec";

/// Ordered `(path, tensor)` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, path: impl Into<String>, t: Tensor) {
        self.entries.push((path.into(), t));
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    /// Adds every registry entry under `prefix/`.
    pub fn push_registry(&mut self, prefix: &str, r: &ParameterRegistry) {
        for (path, p) in r.iter() {
            self.push(format!("{prefix}/{path}"), p.tensor.clone());
        }
    }

    /// Rebuilds a registry from entries under `prefix/`, all trainable.
    pub fn registry(&self, prefix: &str) -> Result<ParameterRegistry> {
        let mut r = ParameterRegistry::new();
        let head = format!("{prefix}/");
        for (path, t) in &self.entries {
            if let Some(rest) = path.strip_prefix(&head) {
                r.insert(rest, t.clone(), true)?;
            }
        }
        Ok(r)
    }

    pub fn from_model(m: &Model) -> Self {
        let mut c = Checkpoint::default();
        c.push(SPEC_PATH, m.spec.encode());
        c.push_registry("model", &m.registry);
        c
    }

    /// Restores a model, checking every parameter against a fresh init of
    /// the stored spec.
    pub fn to_model(&self) -> Result<Model> {
        let spec = ModelSpec::decode(
            self.get(SPEC_PATH)
                .ok_or_else(|| Error::invalid("checkpoint has no model spec"))?,
        )?;
        let registry = self.registry("model")?;
        let fresh = Model::init(spec.clone(), &mut crate::rng::SeededRng::new(0))?;
        if fresh.registry.len() != registry.len()
            || fresh
                .registry
                .iter()
                .any(|(p, f)| registry.get(p).map(|t| t.shape()) != Some(f.tensor.shape()))
        {
            return Err(Error::invalid("checkpoint parameters do not match the stored spec"));
        }
        Ok(Model { spec, registry })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (path, t) in &self.entries {
            let len = u16::try_from(path.len()).map_err(|_| Error::invalid(format!("path too long: {path}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("corrupt checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing UHKDCKPT header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch"));
        }
        let mut cur = Cursor { buf: body, pos: 8 };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let path = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| bad("path is not UTF-8"))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = cur
                .take(n.checked_mul(8).ok_or_else(|| bad("extent overflow"))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((path, Tensor::new(shape, data)?));
        }
        if cur.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { entries })
    }

    /// Writes through a temporary file and a rename, so an interrupted
    /// write never replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::invalid("corrupt checkpoint: truncated entry"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
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
    use crate::rng::SeededRng;
    use crate::zoo::Family;

    #[test]
    fn byte_layout() {
        let mut c = Checkpoint::default();
        c.push("ab", Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..8], b"UHKDCKPT");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..18], &2u16.to_le_bytes());
        assert_eq!(&b[18..20], b"ab");
        assert_eq!(&b[20..24], &1u32.to_le_bytes());
        assert_eq!(&b[24..32], &2u64.to_le_bytes());
        assert_eq!(&b[32..40], &1.0f64.to_le_bytes());
        assert_eq!(&b[40..48], &(-2.0f64).to_le_bytes());
        assert_eq!(&b[48..], &crc32fast::hash(&b[..48]).to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn corruption_detected() {
        let m = Model::init(ModelSpec::small(Family::Cnn, 3), &mut SeededRng::new(1)).unwrap();
        let mut b = Checkpoint::from_model(&m).to_bytes().unwrap();
        let mid = b.len() / 2;
        b[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&b).is_err());
        assert!(Checkpoint::from_bytes(&b[..10]).is_err());
    }

    #[test]
    fn model_round_trip() {
        let m = Model::init(ModelSpec::small(Family::Mlp, 4), &mut SeededRng::new(2)).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::from_model(&m).to_bytes().unwrap())
            .unwrap()
            .to_model()
            .unwrap();
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.registry.digest(), m.registry.digest());
    }
}
