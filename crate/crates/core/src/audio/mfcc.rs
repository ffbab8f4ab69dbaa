use super::{FeatureKind, FeatureMatrix};
use crate::error::{invalid, Result};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

struct Dct2 {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    twiddle: Vec<Complex64>,
}

impl Dct2 {
    fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(2 * n);
        let twiddle = (0..n)
            .map(|k| Complex64::from_polar(1.0, -PI * k as f64 / (2 * n) as f64))
            .collect();
        Self { n, fft, twiddle }
    }

    /// Orthonormal DCT-II through a length-2N FFT of the mirrored input.
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut buf: Vec<Complex64> = x
            .iter()
            .chain(x.iter().rev())
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let s0 = (1.0 / n as f64).sqrt();
        let sk = (2.0 / n as f64).sqrt();
        for (k, o) in out.iter_mut().enumerate() {
            let c = 0.5 * (self.twiddle[k] * buf[k]).re;
            *o = c * if k == 0 { s0 } else { sk };
        }
    }
}

/// Orthonormal DCT-II of one vector.
pub fn dct2_orthonormal(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if !x.is_empty() {
        Dct2::new(x.len()).apply(x, &mut out);
    }
    out
}

/// Per-frame orthonormal DCT-II of a log-mel matrix, keeping `n_coeffs`.
pub fn mfcc(lm: &FeatureMatrix, n_coeffs: usize) -> Result<FeatureMatrix> {
    let n = lm.bins();
    if n_coeffs == 0 || n_coeffs > n {
        return Err(invalid(format!(
            "cannot keep {n_coeffs} cepstral coefficients from {n} mel bands"
        )));
    }
    let dct = Dct2::new(n);
    let mut full = vec![0.0; n];
    let mut data = Vec::with_capacity(lm.frames() * n_coeffs);
    for t in 0..lm.frames() {
        dct.apply(lm.frame(t), &mut full);
        data.extend_from_slice(&full[..n_coeffs]);
    }
    FeatureMatrix::new(data, lm.frames(), n_coeffs, FeatureKind::Mfcc, lm.frame_rate)
}
