//! Paired audio/image scenes with known generating parameters.

use crate::audio::{self, FeatureConfig, FeatureMatrix, FeatureSet, Waveform};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;
use std::io::{Read, Write};

pub const DATASET_MAGIC: &[u8; 8] = b"IVFSYN1\0";

/// Rendering conditions. `Unseen` lowers the SNR and detunes the tones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            other => Err(invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-class generating parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSignature {
    /// Tone frequencies in Hz, on exact DFT bins of the clip.
    pub tones: [f64; 2],
    /// Band-limited noise support in Hz.
    pub noise_band: (f64, f64),
    pub color: [f64; 3],
    /// Stripe period in pixels.
    pub period: f64,
    /// Stripe orientation in radians.
    pub orientation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub n_classes: usize,
    pub sample_rate: u32,
    pub clip_samples: usize,
    pub image_size: usize,
    pub tone_amplitude: f64,
    pub band_rms: f64,
    /// Ratio of tone plus band power to white-noise power.
    pub snr_db: f64,
    pub unseen_snr_db: f64,
    /// Relative tone shift applied to the unseen split.
    pub unseen_detune: f64,
    pub pixel_noise: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            sample_rate: 16_000,
            clip_samples: 16_896,
            image_size: 32,
            tone_amplitude: 0.25,
            band_rms: 0.1,
            snr_db: 10.0,
            unseen_snr_db: 0.0,
            unseen_detune: 0.03,
            pixel_noise: 0.05,
        }
    }
}

/// One rendered clip and its paired frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneClip {
    pub label: usize,
    /// `[3, S, S]` in roughly `[0, 1]`.
    pub image: Tensor,
    pub audio: Waveform,
}

/// An image with its audio features and, when labelled, the class.
#[derive(Clone, Debug, PartialEq)]
pub struct AvPair {
    pub image: Tensor,
    pub audio: FeatureMatrix,
    pub label: Option<usize>,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("synthetic scenes need at least 2 classes".into()));
        }
        if self.sample_rate == 0 || self.clip_samples < 2 || self.image_size == 0 {
            return Err(Error::Config("synthetic clip and image sizes must be positive".into()));
        }
        if !(self.tone_amplitude >= 0.0 && self.band_rms >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(Error::Config("synthetic amplitudes must be non-negative".into()));
        }
        if !(self.unseen_detune > -0.5 && self.unseen_detune < 0.5) {
            return Err(Error::Config("unseen detune must lie in (-0.5, 0.5)".into()));
        }
        let sigs: Vec<ClassSignature> = (0..self.n_classes).map(|c| self.signature(c)).collect();
        let nyq = self.sample_rate as f64 / 2.0;
        for (i, a) in sigs.iter().enumerate() {
            if a.tones[1] * (1.0 + self.unseen_detune.abs()) >= nyq || a.noise_band.1 >= nyq {
                return Err(Error::Config("class signature exceeds Nyquist".into()));
            }
            for b in &sigs[i + 1..] {
                if a.tones == b.tones {
                    return Err(Error::Config("class signatures collide".into()));
                }
            }
        }
        Ok(())
    }

    fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.clip_samples as f64
    }

    fn snap(&self, hz: f64) -> f64 {
        (hz / self.bin_hz()).round() * self.bin_hz()
    }

    pub fn signature(&self, c: usize) -> ClassSignature {
        let n = self.n_classes as f64;
        let top = 0.75 * self.sample_rate as f64 / 2.0;
        let spacing = (top - 300.0) / n;
        let f1 = 300.0 + spacing * c as f64;
        let f2 = f1 + 0.5 * spacing;
        let slot = ((7 * c + 3) % self.n_classes) as f64;
        let lo = 300.0 + spacing * slot + 0.1 * spacing;
        let hue = c as f64 / n;
        ClassSignature {
            tones: [self.snap(f1), self.snap(f2)],
            noise_band: (lo, lo + 0.3 * spacing),
            color: hsv(hue, 0.8, 0.9),
            period: 3.0 + 1.5 * (c % 5) as f64,
            orientation: PI * c as f64 / n,
        }
    }

    fn white_sigma(&self, split: Split) -> f64 {
        let snr = match split {
            Split::Seen => self.snr_db,
            Split::Unseen => self.unseen_snr_db,
        };
        let signal = self.tone_amplitude.powi(2) + self.band_rms.powi(2);
        (signal / 10f64.powf(snr / 10.0)).sqrt()
    }

    fn band_bins(&self, sig: &ClassSignature) -> (usize, usize) {
        let lo = (sig.noise_band.0 / self.bin_hz()).ceil() as usize;
        let hi = (sig.noise_band.1 / self.bin_hz()).floor() as usize;
        (lo.max(1), hi.max(lo.max(1)))
    }

    fn render_audio(&self, sig: &ClassSignature, split: Split, rng: &mut ChaCha8Rng) -> Result<Waveform> {
        let n = self.clip_samples;
        let sr = self.sample_rate as f64;
        let detune = match split {
            Split::Seen => 1.0,
            Split::Unseen => 1.0 + self.unseen_detune,
        };
        let mut x = vec![0.0; n];
        for &f in &sig.tones {
            let phase = rng.random_range(0.0..2.0 * PI);
            let w = 2.0 * PI * f * detune / sr;
            for (i, v) in x.iter_mut().enumerate() {
                *v += self.tone_amplitude * (w * i as f64 + phase).sin();
            }
        }
        // Band noise: random Fourier coefficients on the band bins.
        let (lo, hi) = self.band_bins(sig);
        let s = self.band_rms / ((hi - lo + 1) as f64).sqrt();
        let mut spec = vec![Complex64::new(0.0, 0.0); n];
        for k in lo..=hi {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            spec[k] = Complex64::new(a * s / 2.0, -b * s / 2.0);
            spec[n - k] = spec[k].conj();
        }
        FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
        let sigma = self.white_sigma(split);
        for (v, c) in x.iter_mut().zip(&spec) {
            let z: f64 = StandardNormal.sample(rng);
            *v += c.re + sigma * z;
        }
        Waveform::new(x, self.sample_rate)
    }

    fn render_image(&self, sig: &ClassSignature, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let s = self.image_size;
        let phase = rng.random_range(0.0..2.0 * PI);
        let (cos, sin) = (sig.orientation.cos(), sig.orientation.sin());
        let mut data = Vec::with_capacity(3 * s * s);
        for ch in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * cos + y as f64 * sin) / sig.period;
                    let stripe = 0.55 + 0.35 * (2.0 * PI * u + phase).sin();
                    let z: f64 = StandardNormal.sample(rng);
                    data.push(sig.color[ch] * stripe + self.pixel_noise * z);
                }
            }
        }
        Tensor::new(vec![3, s, s], data)
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `n` clips, deterministic in `seed`. Labels come in shuffled blocks
/// holding every class once, so class counts differ by at most one.
pub fn gen_synthetic(spec: &SyntheticSceneSpec, n: usize, seed: u64, split: Split) -> Result<Vec<SceneClip>> {
    spec.validate()?;
    let sigs: Vec<ClassSignature> = (0..spec.n_classes).map(|c| spec.signature(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block: Vec<usize> = Vec::new();
    (0..n)
        .map(|_| {
            if block.is_empty() {
                block = (0..spec.n_classes).collect();
                block.shuffle(&mut rng);
            }
            let label = block.pop().expect("refilled above");
            let sig = &sigs[label];
            let image = spec.render_image(sig, &mut rng)?;
            let audio = spec.render_audio(sig, split, &mut rng)?;
            Ok(SceneClip { label, image, audio })
        })
        .collect()
}

/// Renders the audio of each clip as `set` and pairs it with its image.
pub fn featurize(clips: &[SceneClip], cfg: &FeatureConfig, set: FeatureSet) -> Result<Vec<AvPair>> {
    let fb = cfg.filterbank()?;
    clips
        .iter()
        .map(|c| {
            Ok(AvPair {
                image: c.image.clone(),
                audio: audio::extract_with(&c.audio, cfg, &fb, set)?,
                label: Some(c.label),
            })
        })
        .collect()
}

/// Permutes the labels among `pairs` so that each true class receives an
/// even mix of all labels (a null-model control), deterministic in `seed`.
///
/// Items are grouped by true class in random order and the label multiset
/// is interleaved evenly over them, so the result is still a permutation of
/// the original labels.
pub fn shuffle_labels(pairs: &mut [AvPair], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pairs[i].label);

    // Copy k of a label with count c sits at (k + phase) / c, so every
    // contiguous run of the sequence holds each label in proportion.
    let mut counts: Vec<(Option<usize>, usize)> = Vec::new();
    for &i in &order {
        match counts.last_mut() {
            Some((l, n)) if *l == pairs[i].label => *n += 1,
            _ => counts.push((pairs[i].label, 1)),
        }
    }
    let mut slots: Vec<(f64, Option<usize>)> = Vec::with_capacity(pairs.len());
    for &(l, n) in &counts {
        let phase: f64 = rng.random();
        slots.extend((0..n).map(|k| ((k as f64 + phase) / n as f64, l)));
    }
    slots.sort_by(|a, b| a.0.total_cmp(&b.0));
    let dealt = slots.into_iter().map(|(_, l)| l);
    for (i, l) in order.into_iter().zip(dealt) {
        pairs[i].label = l;
    }
}

/// Classifier with the generator's parameters: maximizes the Whittle
/// log-likelihood of the clip's periodogram under each class's expected
/// spectrum.
pub struct BayesOracle {
    spec: SyntheticSceneSpec,
    /// Expected periodogram per class over bins `1..N/2`.
    spectra: Vec<Vec<f64>>,
}

impl BayesOracle {
    pub fn new(spec: &SyntheticSceneSpec, split: Split) -> Result<Self> {
        spec.validate()?;
        let n = spec.clip_samples;
        let half = n / 2;
        let noise = spec.white_sigma(split).powi(2);
        let detune = match split {
            Split::Seen => 1.0,
            Split::Unseen => 1.0 + spec.unseen_detune,
        };
        let spectra = (0..spec.n_classes)
            .map(|c| {
                let sig = spec.signature(c);
                let mut s = vec![noise; half];
                let (lo, hi) = spec.band_bins(&sig);
                let per_bin = spec.band_rms.powi(2) / (hi - lo + 1) as f64;
                for v in s.iter_mut().take(hi + 1).skip(lo) {
                    *v += n as f64 * per_bin / 2.0;
                }
                for &f in &sig.tones {
                    let k = (f * detune / spec.bin_hz()).round() as usize;
                    if k < half {
                        s[k] += spec.tone_amplitude.powi(2) * n as f64 / 4.0;
                    }
                }
                s
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            spectra,
        })
    }

    pub fn log_likelihoods(&self, w: &Waveform) -> Result<Vec<f64>> {
        let n = self.spec.clip_samples;
        if w.samples.len() != n {
            return Err(invalid(format!("oracle expects {n} samples, got {}", w.samples.len())));
        }
        let mut buf: Vec<Complex64> = w.samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let pgram: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm_sqr() / n as f64).collect();
        Ok(self
            .spectra
            .iter()
            .map(|s| {
                -(1..n / 2)
                    .map(|k| s[k].ln() + pgram[k] / s[k])
                    .sum::<f64>()
            })
            .collect())
    }

    pub fn classify(&self, w: &Waveform) -> Result<usize> {
        let ll = self.log_likelihoods(w)?;
        Ok(ll
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }

    pub fn accuracy(&self, clips: &[SceneClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(invalid("oracle needs at least one clip"));
        }
        let mut hits = 0;
        for c in clips {
            if self.classify(&c.audio)? == c.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / clips.len() as f64)
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| invalid(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Writes clips as `IVFSYN1\0`, then `u32` count, sample rate, clip length,
/// image side and class count, then per clip a `u32` label, the image and
/// the samples as little-endian `f32`.
pub fn write_dataset<W: Write>(mut w: W, spec: &SyntheticSceneSpec, clips: &[SceneClip]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    for v in [
        clips.len(),
        spec.sample_rate as usize,
        spec.clip_samples,
        spec.image_size,
        spec.n_classes,
    ] {
        put_u32(&mut w, v)?;
    }
    let img_len = 3 * spec.image_size * spec.image_size;
    for c in clips {
        if c.image.len() != img_len || c.audio.samples.len() != spec.clip_samples {
            return Err(invalid("clip does not match the dataset header"));
        }
        put_u32(&mut w, c.label)?;
        for &v in c.image.data().iter().chain(&c.audio.samples) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Header fields of a dataset file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: usize,
    pub sample_rate: u32,
    pub clip_samples: usize,
    pub image_size: usize,
    pub n_classes: usize,
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<(DatasetHeader, Vec<SceneClip>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| invalid("dataset file is truncated"))?;
    if &magic != DATASET_MAGIC {
        return Err(invalid("not a synthetic dataset file"));
    }
    let h = DatasetHeader {
        count: get_u32(&mut r)?,
        sample_rate: get_u32(&mut r)? as u32,
        clip_samples: get_u32(&mut r)?,
        image_size: get_u32(&mut r)?,
        n_classes: get_u32(&mut r)?,
    };
    let img_len = 3 * h.image_size * h.image_size;
    let mut clips = Vec::with_capacity(h.count);
    let mut buf = vec![0u8; 4 * (img_len + h.clip_samples)];
    for _ in 0..h.count {
        let label = get_u32(&mut r).map_err(|_| invalid("dataset file is truncated"))?;
        if label >= h.n_classes {
            return Err(invalid(format!("label {label} out of range")));
        }
        r.read_exact(&mut buf)
            .map_err(|_| invalid("dataset file is truncated"))?;
        let vals: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let image = Tensor::new(vec![3, h.image_size, h.image_size], vals[..img_len].to_vec())?;
        let audio = Waveform::new(vals[img_len..].to_vec(), h.sample_rate)?;
        clips.push(SceneClip { label, image, audio });
    }
    Ok((h, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSceneSpec::default();
        let bytes = |seed| {
            let clips = gen_synthetic(&spec, 4, seed, Split::Seen).unwrap();
            let mut out = Vec::new();
            write_dataset(&mut out, &spec, &clips).unwrap();
            out
        };
        assert_eq!(bytes(7), bytes(7));
        assert_ne!(bytes(7), bytes(8));
    }

    #[test]
    fn dataset_roundtrip() {
        let spec = SyntheticSceneSpec::default();
        let clips = gen_synthetic(&spec, 3, 1, Split::Unseen).unwrap();
        let mut out = Vec::new();
        write_dataset(&mut out, &spec, &clips).unwrap();
        let (h, back) = read_dataset(out.as_slice()).unwrap();
        assert_eq!(h.count, 3);
        assert_eq!(h.n_classes, 3);
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert!(a.audio.samples.iter().zip(&b.audio.samples).all(|(x, y)| (*x as f32) as f64 == *y));
        }
        assert!(read_dataset(&out[..40]).is_err());
        assert!(read_dataset(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn oracle_is_near_perfect_at_default_snr() {
        let spec = SyntheticSceneSpec::default();
        let clips = gen_synthetic(&spec, 200, 7, Split::Seen).unwrap();
        let acc = BayesOracle::new(&spec, Split::Seen).unwrap().accuracy(&clips).unwrap();
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn ten_class_labels_are_uniform() {
        let spec = SyntheticSceneSpec {
            n_classes: 10,
            clip_samples: 2048,
            image_size: 2,
            ..SyntheticSceneSpec::default()
        };
        let clips = gen_synthetic(&spec, 10_000, 3, Split::Seen).unwrap();
        let mut counts = [0usize; 10];
        for c in &clips {
            counts[c.label] += 1;
        }
        for &n in &counts {
            assert!((n as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
        }
    }

    #[test]
    fn signatures_are_distinct_and_valid() {
        for n in 2..=20 {
            let spec = SyntheticSceneSpec {
                n_classes: n,
                ..SyntheticSceneSpec::default()
            };
            spec.validate().unwrap();
        }
        let bad = SyntheticSceneSpec {
            n_classes: 1,
            ..SyntheticSceneSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clip_shapes_and_feature_frames() {
        let spec = SyntheticSceneSpec::default();
        let clips = gen_synthetic(&spec, 2, 5, Split::Seen).unwrap();
        assert_eq!(clips[0].image.shape(), &[3, 32, 32]);
        let cfg = FeatureConfig::default();
        let pairs = featurize(&clips, &cfg, FeatureSet::LogMel).unwrap();
        assert_eq!(pairs[0].audio.frames(), 32);
        assert_eq!(pairs[0].audio.bins(), 64);
        assert_eq!(cfg.feature_frames(FeatureSet::LogMel, spec.clip_samples), Some(32));
        let st = featurize(&clips, &cfg, FeatureSet::LogMelDeltaDelta).unwrap();
        assert_eq!(
            Some(st[0].audio.frames()),
            cfg.feature_frames(FeatureSet::LogMelDeltaDelta, spec.clip_samples)
        );
    }

    proptest::proptest! {
        #[test]
        fn shuffled_labels_are_a_stratified_permutation(
            labels in proptest::collection::vec(0usize..4, 1..60),
            seed in 0u64..1000,
        ) {
            let pair = |l: usize| AvPair {
                image: Tensor::zeros(&[1]),
                audio: FeatureMatrix::new(vec![0.0], 1, 1, audio::FeatureKind::LogMel, 1.0).unwrap(),
                label: Some(l),
            };
            let mut pairs: Vec<AvPair> = labels.iter().map(|&l| pair(l)).collect();
            shuffle_labels(&mut pairs, seed);
            let mut before = labels.clone();
            let mut after: Vec<usize> = pairs.iter().map(|p| p.label.unwrap()).collect();
            let shuffled = after.clone();
            before.sort_unstable();
            after.sort_unstable();
            proptest::prop_assert_eq!(&before, &after);
            // Each true class gets every label in proportion to its count.
            let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
            for c in &distinct {
                let n_c = labels.iter().filter(|&&l| l == *c).count();
                for l in &distinct {
                    let got = labels.iter().zip(&shuffled).filter(|&(t, n)| t == c && n == l).count();
                    let total_l = labels.iter().filter(|&&x| x == *l).count();
                    let share = n_c as f64 * total_l as f64 / labels.len() as f64;
                    proptest::prop_assert!((got as f64 - share).abs() <= 2.0,
                        "class {} label {}: {} vs expected {:.1}", c, l, got, share);
                }
            }
        }
    }
}
