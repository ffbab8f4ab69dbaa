use super::{FeatureKind, FeatureMatrix};
use crate::error::{invalid, Result};

/// Regression deltas over `±width` frames with edge frames replicated.
///
/// `d_t = Σ_{n=1..W} n (x_{t+n} - x_{t-n}) / (2 Σ n²)`. Applying it to a
/// delta matrix gives delta-deltas.
pub fn delta(f: &FeatureMatrix, width: usize) -> Result<FeatureMatrix> {
    if width == 0 {
        return Err(invalid("delta width must be at least 1"));
    }
    let (t_len, bins) = (f.frames(), f.bins());
    let denom = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    let last = t_len as isize - 1;
    let at = |t: isize| t.clamp(0, last) as usize;
    let mut data = vec![0.0; t_len * bins];
    for t in 0..t_len {
        let row = &mut data[t * bins..(t + 1) * bins];
        for n in 1..=width {
            let fwd = f.frame(at(t as isize + n as isize));
            let back = f.frame(at(t as isize - n as isize));
            for ((d, a), b) in row.iter_mut().zip(fwd).zip(back) {
                *d += n as f64 * (a - b);
            }
        }
        row.iter_mut().for_each(|d| *d /= denom);
    }
    let kind = match f.kind {
        FeatureKind::Delta => FeatureKind::DeltaDelta,
        _ => FeatureKind::Delta,
    };
    FeatureMatrix::new(data, t_len, bins, kind, f.frame_rate)
}

/// Concatenates `[base, delta, delta-delta, ...]` along bins, keeping only the
/// frames where every part is free of replicated edges.
///
/// The `k`-th part (0-based) needs `k * width` real frames on each side, so the
/// common range is `[(n-1)W, T-(n-1)W)` for `n` parts.
pub fn stack_without_padding(parts: &[&FeatureMatrix], width: usize) -> Result<FeatureMatrix> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("nothing to stack"))?;
    let t_len = first.frames();
    if parts.iter().any(|p| p.frames() != t_len) {
        return Err(invalid("stacked parts must share a frame count"));
    }
    let trim = (parts.len() - 1) * width;
    if t_len <= 2 * trim {
        return Err(invalid(format!(
            "{t_len} frames leave no valid range after trimming {trim} on each side"
        )));
    }
    let bins: usize = parts.iter().map(|p| p.bins()).sum();
    let frames = t_len - 2 * trim;
    let mut data = Vec::with_capacity(frames * bins);
    for t in trim..t_len - trim {
        for p in parts {
            data.extend_from_slice(p.frame(t));
        }
    }
    FeatureMatrix::new(data, frames, bins, FeatureKind::Stacked, first.frame_rate)
}
