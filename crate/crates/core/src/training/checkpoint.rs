//! `IVFCKPT1` checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `IVFCKPT1`; `u64` step; `u32` config length and UTF-8 config echo;
//! `u32` entry count; per entry `u32` name length, name, `u32` rank, `u64`
//! extents and `u64` offset into the data block (in values); `u64` value
//! count; the values as `f32`; finally the SHA-256 of everything before it.

use crate::error::{Error, Result};
use crate::networks::ParamSet;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IVFCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub entries: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("file is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(step: u64, config: impl Into<String>) -> Self {
        Self {
            step,
            config: config.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn push_params(&mut self, ps: &ParamSet) {
        for (n, t) in ps.iter() {
            self.push(n, t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| bad(format!("missing component `{name}`")))
    }

    /// Entries whose names start with `prefix`, in file order.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamSet {
        let mut ps = ParamSet::new();
        for (n, t) in &self.entries {
            if n.starts_with(prefix) {
                ps.push(n.clone(), t.clone());
            }
        }
        ps
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.as_bytes();
        out.extend_from_slice(&(u32::try_from(cfg.len()).map_err(|_| bad("config too long"))?).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.entries {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < CHECKPOINT_MAGIC.len() + 32 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut c = Cursor { buf: body, pos: 8 };
        let step = c.u64()?;
        let n = c.u32()?;
        let config = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| bad("config is not UTF-8"))?;
        let count = c.u32()?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = c.u32()?;
            let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
            let rank = c.u32()?;
            let shape = (0..rank)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = c.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let total = c.u64()? as usize;
        let data = c.take(total.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
        if c.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        let vals: Vec<f64> = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mut entries = Vec::with_capacity(count);
        for (name, shape, offset) in manifest {
            let len: usize = shape.iter().product();
            let slice = vals
                .get(offset..offset + len)
                .ok_or_else(|| bad(format!("`{name}` points outside the data block")))?;
            let t = Tensor::new(shape, slice.to_vec())
                .map_err(|e| bad(format!("`{name}`: {e}")))?;
            entries.push((name, t));
        }
        Ok(Self { step, config, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(42, "k = 64\nvariant = ivf\n");
        c.push("codebook", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 0.0, 3.0]).unwrap());
        c.push("enc.conv0.b", Tensor::from_vec(vec![1.0, 2.0]));
        c
    }

    #[test]
    fn roundtrip_and_layout() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"IVFCKPT1");
        assert_eq!(&bytes[8..16], &42u64.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params_with_prefix("enc.").len(), 1);
        assert!(back.require("dec.conv0.w").is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::InvalidCheckpoint(_))));
        assert!(Checkpoint::from_bytes(b"IVFCKPT0").is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn values_are_rounded_to_f32() {
        let mut c = Checkpoint::new(0, "");
        c.push("x", Tensor::from_vec(vec![0.1]));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.entries[0].1.item(), 0.1f32 as f64);
    }
}
