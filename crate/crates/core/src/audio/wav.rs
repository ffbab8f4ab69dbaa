use super::Waveform;
use crate::error::{invalid, Result};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use std::path::Path;

/// Reads a PCM WAV file, averaging channels to mono. Samples are scaled to
/// [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int {
        return Err(invalid(format!(
            "{}: only integer PCM is supported",
            path.as_ref().display()
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
    let raw: Vec<i32> = reader.samples::<i32>().collect::<std::result::Result<_, _>>()?;
    let samples: Vec<f64> = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() * scale / channels as f64)
        .collect();
    if samples.is_empty() {
        return Err(invalid(format!("{}: no samples", path.as_ref().display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
