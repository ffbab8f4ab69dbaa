use super::{FeatureKind, FeatureMatrix, Spectrum};
use crate::error::{invalid, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale, peak weight 1.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// `n_mels x (fft_size/2 + 1)`.
    pub weights: Vec<f64>,
    bins: usize,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(
        n_mels: usize,
        fft_size: usize,
        sample_rate: u32,
        f_min: f64,
        f_max: f64,
    ) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 {
            return Err(invalid("mel band count must be positive"));
        }
        if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
            return Err(invalid(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got {f_min}..{f_max}"
            )));
        }
        let bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * bins..(m + 1) * bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let up = (f - l) / (c - l);
                let down = (r - f) / (r - c);
                *w = up.min(down).max(0.0);
            }
            if row.iter().all(|&w| w <= 0.0) {
                return Err(invalid(format!(
                    "mel band {m} ({l:.1}-{r:.1} Hz) covers no FFT bin; use fewer bands or a larger FFT"
                )));
            }
        }
        Ok(Self {
            n_mels,
            f_min,
            f_max,
            weights,
            bins,
            centers: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn band(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Peak frequency of each band in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
}

/// `log(max(floor, Σ_k w[m][k] |X[t][k]|²))`, natural log.
pub fn log_mel(spec: &Spectrum, fb: &MelFilterbank, floor: f64) -> Result<FeatureMatrix> {
    if spec.bins != fb.bins {
        return Err(invalid(format!(
            "spectrum has {} bins but filterbank expects {}",
            spec.bins, fb.bins
        )));
    }
    if floor <= 0.0 || !floor.is_finite() {
        return Err(invalid(format!("log floor must be positive, got {floor}")));
    }
    let mut data = Vec::with_capacity(spec.frames * fb.n_mels);
    let mut power = vec![0.0; spec.bins];
    for t in 0..spec.frames {
        for (p, x) in power.iter_mut().zip(spec.frame(t)) {
            *p = x.norm_sqr();
        }
        for m in 0..fb.n_mels {
            let e: f64 = fb.band(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push(e.max(floor).ln());
        }
    }
    FeatureMatrix::new(
        data,
        spec.frames,
        fb.n_mels,
        FeatureKind::LogMel,
        spec.sample_rate as f64 / spec.hop_size as f64,
    )
}
