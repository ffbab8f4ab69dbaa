use super::Waveform;
use crate::error::{invalid, Result};
use std::f64::consts::PI;

const ZERO_CROSSINGS: f64 = 32.0;
const ROLLOFF: f64 = 0.94;

/// Band-limited resampling by a Blackman-windowed sinc kernel.
///
/// The cutoff sits just below the lower of the two Nyquist rates and each
/// output tap set is normalised to unit DC gain.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(invalid("target sample rate must be positive"));
    }
    if w.samples.is_empty() {
        return Err(invalid("cannot resample an empty waveform"));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as f64;
    let dst = target_rate as f64;
    let ratio = src / dst;
    let out_len = ((w.samples.len() as f64) * dst / src).round().max(1.0) as usize;
    // Cutoff in cycles per input sample.
    let fc = 0.5 * (dst / src).min(1.0) * ROLLOFF;
    let half = ZERO_CROSSINGS / (2.0 * fc);
    let n_in = w.samples.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let lo = (pos - half).ceil() as isize;
        let hi = (pos + half).floor() as isize;
        let mut acc = 0.0;
        for k in lo.max(0)..=hi.min(n_in - 1) {
            let u = pos - k as f64;
            let h = kernel(u, fc, half);
            acc += h * w.samples[k as usize];
        }
        // Normalised by the full kernel so edges taper like zero padding.
        out.push(acc / kernel_gain(pos, fc, half));
    }
    Waveform::new(out, target_rate)
}

fn kernel(u: f64, fc: f64, half: f64) -> f64 {
    if u.abs() > half {
        return 0.0;
    }
    let x = 2.0 * fc * u;
    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    let r = u / half;
    let window = 0.42 + 0.5 * (PI * r).cos() + 0.08 * (2.0 * PI * r).cos();
    2.0 * fc * sinc * window
}

/// Sum of the kernel over every integer tap, ignoring signal boundaries.
fn kernel_gain(pos: f64, fc: f64, half: f64) -> f64 {
    let lo = (pos - half).ceil() as isize;
    let hi = (pos + half).floor() as isize;
    (lo..=hi).map(|k| kernel(pos - k as f64, fc, half)).sum()
}
