//! `IVF1` feature files: magic, little-endian `u32` kind/frames/bins, then
//! `frames * bins` little-endian `f32` values in row-major order.

use super::{FeatureKind, FeatureMatrix};
use crate::error::{invalid, Result};
use std::io::{Read, Write};

pub const FEATURE_MAGIC: &[u8; 4] = b"IVF1";

pub fn write_feature_file<W: Write>(mut w: W, f: &FeatureMatrix) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    for v in [f.kind.code(), f.frames() as u32, f.bins() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(f.data().len() * 4);
    for &v in f.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads an `IVF1` file. The frame rate is not stored and comes back as 0.
pub fn read_feature_file<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(invalid(format!("bad feature file magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    let mut header = [0u32; 3];
    for h in header.iter_mut() {
        r.read_exact(&mut word)?;
        *h = u32::from_le_bytes(word);
    }
    let kind = FeatureKind::from_code(header[0])
        .ok_or_else(|| invalid(format!("unknown feature kind code {}", header[0])))?;
    let (frames, bins) = (header[1] as usize, header[2] as usize);
    let mut bytes = vec![0u8; frames * bins * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureMatrix::new(data, frames, bins, kind, 0.0)
}
