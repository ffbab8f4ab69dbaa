use super::Waveform;
use crate::error::{invalid, Result};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        })
    }
}

impl std::str::FromStr for Window {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(Window::Hann),
            "rectangular" | "rect" => Ok(Window::Rectangular),
            other => Err(invalid(format!("unknown window `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop_size: 512,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(invalid(format!("fft size {} is not a power of two", self.fft_size)));
        }
        if self.hop_size == 0 || self.hop_size > self.fft_size {
            return Err(invalid(format!(
                "hop size {} must be in 1..={}",
                self.hop_size, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop_size
        }
    }
}

/// Complex one-sided STFT, `frames x (fft_size/2 + 1)`.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
    pub sample_rate: u32,
    pub hop_size: usize,
}

impl Spectrum {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrum> {
    cfg.validate()?;
    let n = cfg.fft_size;
    if w.samples.len() < n {
        return Err(invalid(format!(
            "waveform of {} samples is shorter than one {n}-sample frame",
            w.samples.len()
        )));
    }
    let frames = cfg.frames_for(w.samples.len());
    let bins = cfg.bins();
    let win = cfg.window.coefficients(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * cfg.hop_size;
        for (b, (s, wv)) in buf
            .iter_mut()
            .zip(w.samples[start..start + n].iter().zip(&win))
        {
            *b = Complex64::new(s * wv, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrum {
        frames,
        bins,
        data,
        sample_rate: w.sample_rate,
        hop_size: cfg.hop_size,
    })
}
