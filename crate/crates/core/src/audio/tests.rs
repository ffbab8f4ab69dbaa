use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;

fn sine(freq: f64, rate: u32, secs: f64, amp: f64) -> Waveform {
    let n = (rate as f64 * secs) as usize;
    let s = (0..n)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
        .collect();
    Waveform::new(s, rate).unwrap()
}

fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| {
                    let a = -2.0 * PI * (k * t % n) as f64 / n as f64;
                    Complex64::new(v * a.cos(), v * a.sin())
                })
                .sum()
        })
        .collect()
}

fn naive_dct2(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

fn naive_idct(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    (0..c.len())
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, v)| {
                    let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                    s * v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
                })
                .sum()
        })
        .collect()
}

fn random_signal(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

#[test]
fn resample_ten_seconds_cd_rate_to_16k() {
    let w = Waveform::new(vec![0.1; 441_000], 44_100).unwrap();
    let r = resample(&w, 16_000).unwrap();
    assert_eq!(r.samples.len(), 160_000);
    assert_eq!(r.sample_rate, 16_000);
}

#[test]
fn resample_to_same_rate_is_identity() {
    let w = Waveform::new(random_signal(1000, 1), 16_000).unwrap();
    assert_eq!(resample(&w, 16_000).unwrap(), w);
}

#[test]
fn resample_rejects_empty_input() {
    let w = Waveform::new(vec![], 48_000).unwrap();
    assert!(resample(&w, 16_000).is_err());
}

#[test]
fn resampled_sine_keeps_frequency_and_amplitude() {
    let w = sine(1000.0, 48_000, 0.25, 0.5);
    let r = resample(&w, 16_000).unwrap();
    assert_eq!(r.samples.len(), 4000);
    let spec = naive_dft(&r.samples);
    let n = r.samples.len();
    let peak = (1..n / 2)
        .max_by(|&a, &b| spec[a].norm().partial_cmp(&spec[b].norm()).unwrap())
        .unwrap();
    let bin_hz = 16_000.0 / n as f64;
    assert_eq!(peak as f64 * bin_hz, 1000.0);
    // The source's own DFT amplitude at 1 kHz is the reference.
    let src = naive_dft(&w.samples);
    let src_amp = 2.0 * src[250].norm() / w.samples.len() as f64;
    let amp = 2.0 * spec[peak].norm() / n as f64;
    assert!((amp - src_amp).abs() / src_amp < 0.01, "{amp} vs {src_amp}");
}

#[test]
fn resampling_removes_content_above_target_nyquist() {
    // 7 kHz survives 48k -> 16k; 11 kHz must not fold back to 5 kHz.
    let a = sine(7000.0, 48_000, 0.25, 0.5);
    let b = sine(11_000.0, 48_000, 0.25, 0.5);
    let mix: Vec<f64> = a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect();
    let r = resample(&Waveform::new(mix, 48_000).unwrap(), 16_000).unwrap();
    let spec = naive_dft(&r.samples);
    let n = r.samples.len() as f64;
    let amp = |hz: f64| 2.0 * spec[(hz * n / 16_000.0) as usize].norm() / n;
    assert!(amp(7000.0) > 0.45);
    assert!(amp(5000.0) < 0.005, "aliased energy {}", amp(5000.0));
}

#[test]
fn stft_of_silence_is_zero() {
    let w = Waveform::new(vec![0.0; 4096], 16_000).unwrap();
    let s = stft(&w, &StftConfig::default()).unwrap();
    assert!(s.data.iter().all(|c| c.norm() == 0.0));
}

#[test]
fn stft_of_dc_with_rectangular_window() {
    let cfg = StftConfig {
        fft_size: 256,
        hop_size: 128,
        window: Window::Rectangular,
    };
    let w = Waveform::new(vec![1.0; 1024], 16_000).unwrap();
    let s = stft(&w, &cfg).unwrap();
    for t in 0..s.frames {
        let f = s.frame(t);
        assert!((f[0].norm() - 256.0).abs() < 1e-9);
        assert!(f[1..].iter().all(|c| c.norm() < 1e-9));
    }
}

#[test]
fn stft_frame_count_and_short_input() {
    let cfg = StftConfig::default();
    let w = Waveform::new(vec![0.0; 160_000], 16_000).unwrap();
    assert_eq!(stft(&w, &cfg).unwrap().frames, 1 + (160_000 - 1024) / 512);
    let short = Waveform::new(vec![0.0; 1000], 16_000).unwrap();
    assert!(stft(&short, &cfg).is_err());
    let bad = StftConfig {
        fft_size: 1000,
        ..cfg
    };
    assert!(stft(&w, &bad).is_err());
}

#[test]
fn stft_matches_naive_dft_per_frame() {
    let cfg = StftConfig {
        fft_size: 256,
        hop_size: 128,
        window: Window::Hann,
    };
    let x = random_signal(4096, 2);
    let w = Waveform::new(x.clone(), 16_000).unwrap();
    let s = stft(&w, &cfg).unwrap();
    assert_eq!(s.frames, 31);
    let win = Window::Hann.coefficients(256);
    for t in 0..s.frames {
        let frame: Vec<f64> = x[t * 128..t * 128 + 256]
            .iter()
            .zip(&win)
            .map(|(a, b)| a * b)
            .collect();
        let oracle = naive_dft(&frame);
        let scale = oracle.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for (a, b) in s.frame(t).iter().zip(&oracle) {
            assert!((a - b).norm() <= 1e-6 * scale);
        }
    }
}

#[test]
fn filterbank_rows_are_nonnegative_triangles() {
    let fb = MelFilterbank::new(64, 1024, 16_000, 0.0, 8000.0).unwrap();
    assert_eq!(fb.weights.len(), 64 * 513);
    for m in 0..64 {
        let row = fb.band(m);
        assert!(row.iter().all(|&w| w >= 0.0));
        assert!(row.iter().any(|&w| w > 0.0));
        // Single contiguous support.
        let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
        assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
    }
    assert!(MelFilterbank::new(64, 1024, 16_000, 0.0, 9000.0).is_err());
    assert!(MelFilterbank::new(64, 1024, 16_000, 500.0, 400.0).is_err());
    assert!(MelFilterbank::new(256, 64, 16_000, 0.0, 8000.0).is_err());
}

#[test]
fn log_mel_of_silence_sits_on_the_floor() {
    let cfg = FeatureConfig::default();
    let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
    let lm = extract(&w, &cfg, FeatureSet::LogMel).unwrap();
    assert_eq!(lm.bins(), 64);
    assert!(lm.data().iter().all(|&v| v == 1e-10f64.ln()));
    assert!((1e-10f64.ln() + 23.0259).abs() < 1e-4);
}

#[test]
fn log_mel_rejects_mismatched_filterbank() {
    let w = Waveform::new(random_signal(4096, 3), 16_000).unwrap();
    let s = stft(&w, &StftConfig::default()).unwrap();
    let fb = MelFilterbank::new(16, 512, 16_000, 0.0, 8000.0).unwrap();
    assert!(log_mel(&s, &fb, 1e-10).is_err());
    let fb = MelFilterbank::new(16, 1024, 16_000, 0.0, 8000.0).unwrap();
    assert!(log_mel(&s, &fb, 0.0).is_err());
}

#[test]
fn log_mel_peak_band_is_nearest_to_tone() {
    let cfg = FeatureConfig::default();
    let fb = cfg.filterbank().unwrap();
    let w = sine(1000.0, 16_000, 1.0, 0.5);
    let lm = extract(&w, &cfg, FeatureSet::LogMel).unwrap();
    let nearest = (0..64)
        .min_by(|&a, &b| {
            let da = (fb.centers()[a] - 1000.0).abs();
            let db = (fb.centers()[b] - 1000.0).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    // Oracle: brute-force DFT power of one windowed frame projected on each band.
    let win = Window::Hann.coefficients(1024);
    let frame: Vec<f64> = w.samples[..1024].iter().zip(&win).map(|(a, b)| a * b).collect();
    let power: Vec<f64> = naive_dft(&frame)[..513].iter().map(|c| c.norm_sqr()).collect();
    let oracle_best = (0..64)
        .max_by(|&a, &b| {
            let ea: f64 = fb.band(a).iter().zip(&power).map(|(w, p)| w * p).sum();
            let eb: f64 = fb.band(b).iter().zip(&power).map(|(w, p)| w * p).sum();
            ea.partial_cmp(&eb).unwrap()
        })
        .unwrap();
    assert_eq!(oracle_best, nearest);
    for t in 0..lm.frames() {
        let f = lm.frame(t);
        let best = (0..64).max_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap()).unwrap();
        assert_eq!(best, nearest);
    }
}

#[test]
fn scaling_waveform_by_ten_shifts_log_mel_by_log_hundred() {
    let cfg = FeatureConfig::default();
    let w = Waveform::new(random_signal(8192, 4), 16_000).unwrap();
    let a = extract(&w, &cfg, FeatureSet::LogMel).unwrap();
    let b = extract(&w.scaled(10.0), &cfg, FeatureSet::LogMel).unwrap();
    let floor = cfg.log_floor.ln();
    for (x, y) in a.data().iter().zip(b.data()) {
        if *x > floor {
            assert!((y - x - 100f64.ln()).abs() < 1e-9);
        }
    }
}

fn matrix(frames: usize, bins: usize, mut f: impl FnMut(usize, usize) -> f64) -> FeatureMatrix {
    let data = (0..frames * bins).map(|i| f(i / bins, i % bins)).collect();
    FeatureMatrix::new(data, frames, bins, FeatureKind::LogMel, 31.25).unwrap()
}

#[test]
fn delta_of_constant_is_exactly_zero() {
    let m = matrix(12, 5, |_, b| b as f64 * 1.7 - 3.0);
    let d = delta(&m, 2).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
    assert_eq!(d.kind, FeatureKind::Delta);
    assert_eq!(delta(&d, 2).unwrap().kind, FeatureKind::DeltaDelta);
}

#[test]
fn delta_of_ramp_is_one_in_the_interior() {
    let m = matrix(20, 3, |t, _| t as f64);
    let d = delta(&m, 2).unwrap();
    for t in 2..18 {
        assert!(d.frame(t).iter().all(|&v| v == 1.0));
    }
}

#[test]
fn delta_matches_direct_formula() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let m = matrix(20, 8, |_, _| r.random_range(-2.0..2.0));
    let d = delta(&m, 2).unwrap();
    let x = |t: isize, b: usize| m.get(t.clamp(0, 19) as usize, b);
    for t in 0..20isize {
        for b in 0..8 {
            let expect = (1.0 * (x(t + 1, b) - x(t - 1, b)) + 2.0 * (x(t + 2, b) - x(t - 2, b))) / 10.0;
            assert!((d.get(t as usize, b) - expect).abs() < 1e-12);
        }
    }
    assert!(delta(&m, 0).is_err());
}

#[test]
fn stacking_trims_to_common_valid_frames() {
    let cfg = FeatureConfig::default();
    let w = Waveform::new(random_signal(16_000, 6), 16_000).unwrap();
    let lm = extract(&w, &cfg, FeatureSet::LogMel).unwrap();
    let st = extract(&w, &cfg, FeatureSet::LogMelDeltaDelta).unwrap();
    assert_eq!(st.bins(), 192);
    assert_eq!(st.frames(), lm.frames() - 8);
    assert_eq!(st.kind, FeatureKind::Stacked);
    // First block of each stacked row is the log-mel frame it came from.
    assert_eq!(&st.frame(0)[..64], lm.frame(4));
    let sd = extract(&w, &cfg, FeatureSet::LogMelDelta).unwrap();
    assert_eq!((sd.frames(), sd.bins()), (lm.frames() - 4, 128));
    let tiny = matrix(4, 2, |t, _| t as f64);
    assert!(stack_without_padding(&[&tiny, &tiny, &tiny], 2).is_err());
}

#[test]
fn mfcc_of_constant_frame() {
    let m = matrix(3, 64, |_, _| 2.5);
    let c = mfcc(&m, 13).unwrap();
    for t in 0..3 {
        let f = c.frame(t);
        assert!((f[0] - 2.5 * 8.0).abs() < 1e-9);
        assert!(f[1..].iter().all(|v| v.abs() < 1e-9));
    }
    assert!(mfcc(&m, 65).is_err());
}

#[test]
fn mfcc_matches_naive_dct_and_inverts() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let m = matrix(4, 40, |_, _| r.random_range(-20.0..5.0));
    let c = mfcc(&m, 40).unwrap();
    for t in 0..4 {
        let oracle = naive_dct2(m.frame(t));
        for (a, b) in c.frame(t).iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let back = naive_idct(c.frame(t));
        for (a, b) in back.iter().zip(m.frame(t)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn feature_file_layout_is_exact() {
    let m = matrix(2, 3, |t, b| (t * 3 + b) as f64 * 0.5);
    let mut buf = Vec::new();
    write_feature_file(&mut buf, &m).unwrap();
    assert_eq!(&buf[..4], b"IVF1");
    assert_eq!(&buf[4..16], &[0, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
    assert_eq!(buf.len(), 16 + 6 * 4);
    assert_eq!(&buf[16 + 4..16 + 8], &0.5f32.to_le_bytes());
    let back = read_feature_file(buf.as_slice()).unwrap();
    assert_eq!(back.data(), m.data());
    assert_eq!(back.kind, FeatureKind::LogMel);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_feature_file(bad.as_slice()).is_err());
    assert!(read_feature_file(&buf[..20]).is_err());
}

#[test]
fn wav_roundtrip_and_stereo_downmix() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    let w = sine(440.0, 16_000, 0.1, 0.5);
    write_wav(&p, &w).unwrap();
    let back = read_wav(&p).unwrap();
    assert_eq!(back.sample_rate, 16_000);
    assert_eq!(back.samples.len(), w.samples.len());
    assert!(back.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-4));

    let sp = dir.path().join("s.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut wr = hound::WavWriter::create(&sp, spec).unwrap();
    for _ in 0..10 {
        wr.write_sample(16384i16).unwrap();
        wr.write_sample(0i16).unwrap();
    }
    wr.finalize().unwrap();
    let st = read_wav(&sp).unwrap();
    assert_eq!(st.samples.len(), 10);
    assert!(st.samples.iter().all(|&s| (s - 0.25).abs() < 1e-12));

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav").unwrap();
    assert!(read_wav(&junk).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn delta_is_linear(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = matrix(9, 4, |_, _| r.random_range(-1.0..1.0));
        let y = matrix(9, 4, |_, _| r.random_range(-1.0..1.0));
        let comb = matrix(9, 4, |t, f| a * x.get(t, f) + b * y.get(t, f));
        let (dx, dy, dc) = (delta(&x, 2).unwrap(), delta(&y, 2).unwrap(), delta(&comb, 2).unwrap());
        for i in 0..36 {
            prop_assert!((dc.data()[i] - (a * dx.data()[i] + b * dy.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn log_mel_is_monotone_in_power(seed in any::<u64>(), alpha in 1.0f64..50.0) {
        let w = Waveform::new(random_signal(2048, seed), 16_000).unwrap();
        let cfg = FeatureConfig::default();
        let fb = cfg.filterbank().unwrap();
        let s = stft(&w, &cfg.stft).unwrap();
        let mut louder = s.clone();
        louder.data.iter_mut().for_each(|c| *c *= alpha.sqrt());
        let a = log_mel(&s, &fb, 1e-10).unwrap();
        let b = log_mel(&louder, &fb, 1e-10).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn full_dct_preserves_frame_norm(seed in any::<u64>(), n in 2usize..80) {
        let x = random_signal(n, seed);
        let c = dct2_orthonormal(&x);
        let nx: f64 = x.iter().map(|v| v * v).sum();
        let nc: f64 = c.iter().map(|v| v * v).sum();
        prop_assert!((nx - nc).abs() <= 1e-9 * nx.max(1.0));
    }
}
