//! Spectral front end: resampling, STFT, log-mel, deltas and MFCC.

mod delta;
mod featfile;
mod mel;
mod mfcc;
mod resample;
mod stft;
mod wav;

pub use delta::{delta, stack_without_padding};
pub use featfile::{read_feature_file, write_feature_file, FEATURE_MAGIC};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, MelFilterbank};
pub use mfcc::{dct2_orthonormal, mfcc};
pub use resample::resample;
pub use stft::{stft, Spectrum, StftConfig, Window};
pub use wav::{read_wav, write_wav};

use crate::error::{invalid, Result};

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * k).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    LogMel,
    Delta,
    DeltaDelta,
    Mfcc,
    Stacked,
}

impl FeatureKind {
    pub fn code(self) -> u32 {
        match self {
            FeatureKind::LogMel => 0,
            FeatureKind::Delta => 1,
            FeatureKind::DeltaDelta => 2,
            FeatureKind::Mfcc => 3,
            FeatureKind::Stacked => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => FeatureKind::LogMel,
            1 => FeatureKind::Delta,
            2 => FeatureKind::DeltaDelta,
            3 => FeatureKind::Mfcc,
            4 => FeatureKind::Stacked,
            _ => return None,
        })
    }
}

/// A `frames x bins` real matrix, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    bins: usize,
    pub kind: FeatureKind,
    /// Frames per second.
    pub frame_rate: f64,
}

impl FeatureMatrix {
    pub fn new(
        data: Vec<f64>,
        frames: usize,
        bins: usize,
        kind: FeatureKind,
        frame_rate: f64,
    ) -> Result<Self> {
        if frames == 0 || bins == 0 {
            return Err(invalid(format!("feature matrix must be non-empty, got {frames}x{bins}")));
        }
        if data.len() != frames * bins {
            return Err(invalid(format!(
                "{frames}x{bins} feature matrix given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature matrix contains non-finite values"));
        }
        Ok(Self {
            data,
            frames,
            bins,
            kind,
            frame_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }
}

/// The feature variants a clip can be rendered as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSet {
    LogMel,
    /// Log-mel and its deltas side by side.
    LogMelDelta,
    /// Log-mel, deltas and delta-deltas side by side.
    LogMelDeltaDelta,
    Mfcc,
}

impl FeatureSet {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::LogMel => "log-mel",
            FeatureSet::LogMelDelta => "log-mel-delta",
            FeatureSet::LogMelDeltaDelta => "stacked",
            FeatureSet::Mfcc => "mfcc",
        }
    }
}

impl std::fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "log-mel" | "logmel" => FeatureSet::LogMel,
            "log-mel-delta" => FeatureSet::LogMelDelta,
            "stacked" | "log-mel-delta-delta" => FeatureSet::LogMelDeltaDelta,
            "mfcc" => FeatureSet::Mfcc,
            other => return Err(invalid(format!("unknown feature kind `{other}`"))),
        })
    }
}

/// Parameters for the whole extraction chain.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub delta_width: usize,
    pub n_mfcc: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            stft: StftConfig::default(),
            n_mels: 64,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
            delta_width: 2,
            n_mfcc: 13,
        }
    }
}

impl FeatureConfig {
    pub fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::new(
            self.n_mels,
            self.stft.fft_size,
            self.sample_rate,
            self.f_min,
            self.f_max,
        )
    }

    /// Output bin count for a feature set.
    pub fn feature_bins(&self, set: FeatureSet) -> usize {
        match set {
            FeatureSet::LogMel => self.n_mels,
            FeatureSet::LogMelDelta => 2 * self.n_mels,
            FeatureSet::LogMelDeltaDelta => 3 * self.n_mels,
            FeatureSet::Mfcc => self.n_mfcc,
        }
    }

    /// Output frame count for a clip of `samples` at the configured rate,
    /// or `None` when the clip is too short.
    pub fn feature_frames(&self, set: FeatureSet, samples: usize) -> Option<usize> {
        let t = self.stft.frames_for(samples);
        let trim = match set {
            FeatureSet::LogMel | FeatureSet::Mfcc => 0,
            FeatureSet::LogMelDelta => 2 * self.delta_width,
            FeatureSet::LogMelDeltaDelta => 4 * self.delta_width,
        };
        (t > trim).then(|| t - trim)
    }
}

/// Resamples to the configured rate if needed, then renders `set`.
pub fn extract(w: &Waveform, cfg: &FeatureConfig, set: FeatureSet) -> Result<FeatureMatrix> {
    let fb = cfg.filterbank()?;
    extract_with(w, cfg, &fb, set)
}

/// [`extract`] with a prebuilt filterbank.
pub fn extract_with(
    w: &Waveform,
    cfg: &FeatureConfig,
    fb: &MelFilterbank,
    set: FeatureSet,
) -> Result<FeatureMatrix> {
    let resampled;
    let w = if w.sample_rate != cfg.sample_rate {
        resampled = resample(w, cfg.sample_rate)?;
        &resampled
    } else {
        w
    };
    let spec = stft(w, &cfg.stft)?;
    let lm = log_mel(&spec, fb, cfg.log_floor)?;
    match set {
        FeatureSet::LogMel => Ok(lm),
        FeatureSet::Mfcc => mfcc(&lm, cfg.n_mfcc),
        FeatureSet::LogMelDelta => {
            let d = delta(&lm, cfg.delta_width)?;
            stack_without_padding(&[&lm, &d], cfg.delta_width)
        }
        FeatureSet::LogMelDeltaDelta => {
            let d = delta(&lm, cfg.delta_width)?;
            let dd = delta(&d, cfg.delta_width)?;
            stack_without_padding(&[&lm, &d, &dd], cfg.delta_width)
        }
    }
}

#[cfg(test)]
mod tests;
