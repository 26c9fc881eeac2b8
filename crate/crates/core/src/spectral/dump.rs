//! `UHKDSPEC` spectrum dumps, little-endian:
//!
//! ```text
//! magic    8 bytes  "UHKDSPEC"
//! version  u32      1
//! rank     u32
//! extents  u64 * rank
//! real     f64 * prod(extents)
//! imag     f64 * prod(extents)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Spectrum;

pub const MAGIC: &[u8; 8] = b"UHKDSPEC";
pub const VERSION: u32 = 1;

/// A decoded dump: shape plus real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumDump {
    pub shape: Vec<usize>,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl SpectrumDump {
    pub fn from_spectrum(s: &Spectrum) -> Self {
        Self {
            shape: s.real.shape().to_vec(),
            real: s.real.data().to_vec(),
            imag: s.imag.data().to_vec(),
        }
    }

    /// A real-valued block (e.g. a magnitude spectrum); imaginary plane zero.
    pub fn from_real(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            real: t.data().to_vec(),
            imag: vec![0.0; t.numel()],
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in self.real.iter().chain(&self.imag) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::invalid("not a UHKDSPEC stream"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::invalid(format!("unsupported UHKDSPEC version {version}")));
        }
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut plane = || (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>();
        let real = plane()?;
        let imag = plane()?;
        Ok(Self { shape, real, imag })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
