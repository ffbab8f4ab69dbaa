//! Run configuration as `key = value` text.
//!
//! Layers apply in order: defaults, then the `preset` named in any layer,
//! then each layer's keys (later layers win).

use crate::audio::{FeatureConfig, FeatureSet};
use crate::error::{Error, Result};
use crate::networks::{Activation, Variant};
use crate::training::{preset, SyntheticSceneSpec, TrainConfig};
use std::fmt::Display;
use std::str::FromStr;

/// Every configurable key, in echo order.
pub const KEYS: &[&str] = &[
    "sample_rate",
    "fft_size",
    "hop_size",
    "window",
    "n_mels",
    "f_min",
    "f_max",
    "log_floor",
    "delta_width",
    "n_mfcc",
    "features",
    "k",
    "d",
    "beta",
    "dead_code_window",
    "image_size",
    "encoder_channels",
    "latent_grid",
    "transform_channels",
    "variant",
    "discriminator_hidden",
    "discriminator_activation",
    "classifier_channels",
    "n_classes",
    "lambda",
    "critic_steps",
    "preset",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "epochs",
    "steps_a",
    "steps_b",
    "checkpoint_every",
    "eval_every",
    "seed",
    "delta_floor",
    "clip_samples",
    "tone_amplitude",
    "band_rms",
    "snr_db",
    "unseen_snr_db",
    "unseen_detune",
    "pixel_noise",
];

/// A layer of overrides, in the order given.
pub type Layer = Vec<(String, String)>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub feature_set: FeatureSet,
    pub synthetic: SyntheticSceneSpec,
    /// Model sizes derived from the other keys are filled in by
    /// [`RunConfig::resolve`].
    pub train: TrainConfig,
    pub preset: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            features: FeatureConfig::default(),
            feature_set: FeatureSet::LogMel,
            synthetic: SyntheticSceneSpec::default(),
            train: TrainConfig::default(),
            preset: "desk".into(),
        };
        c.train.model.classifier.n_classes = c.synthetic.n_classes;
        c.resolve().expect("defaults are consistent");
        c
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| num(key, x)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> Result<Layer> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown config key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_layers(layers: &[Layer]) -> Result<Self> {
        let mut c = Self::default();
        let chosen = layers
            .iter()
            .flatten().rfind(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone());
        if let Some(name) = chosen {
            c.set("preset", &name)?;
        }
        for (k, v) in layers.iter().flatten() {
            if k != "preset" {
                c.set(k, v)?;
            }
        }
        c.resolve()?;
        Ok(c)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_layers(&[parse_text(text)?])
    }

    /// Applies one key. Choosing a preset overwrites the optimizer values.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let f = &mut self.features;
        let t = &mut self.train;
        let m = &mut t.model;
        let s = &mut self.synthetic;
        match key {
            "sample_rate" => {
                f.sample_rate = num(key, v)?;
                s.sample_rate = f.sample_rate;
            }
            "fft_size" => f.stft.fft_size = num(key, v)?,
            "hop_size" => f.stft.hop_size = num(key, v)?,
            "window" => f.stft.window = v.parse().map_err(cfg_err)?,
            "n_mels" => f.n_mels = num(key, v)?,
            "f_min" => f.f_min = num(key, v)?,
            "f_max" => f.f_max = num(key, v)?,
            "log_floor" => f.log_floor = num(key, v)?,
            "delta_width" => f.delta_width = num(key, v)?,
            "n_mfcc" => f.n_mfcc = num(key, v)?,
            "features" => self.feature_set = v.parse().map_err(cfg_err)?,
            "k" => m.transform.k = num(key, v)?,
            "d" => m.autoencoder.d = num(key, v)?,
            "beta" => t.beta = num(key, v)?,
            "dead_code_window" => t.dead_code_window = num(key, v)?,
            "image_size" => {
                m.autoencoder.input_size = num(key, v)?;
                s.image_size = m.autoencoder.input_size;
            }
            "encoder_channels" => m.autoencoder.hidden = list(key, v)?,
            "latent_grid" => m.autoencoder.latent_grid = num(key, v)?,
            "transform_channels" => m.transform.channels = list(key, v)?,
            "variant" => m.transform.variant = v.parse::<Variant>().map_err(cfg_err)?,
            "discriminator_hidden" => m.discriminator.hidden = list(key, v)?,
            "discriminator_activation" => {
                m.discriminator.activation = v.parse::<Activation>().map_err(cfg_err)?
            }
            "classifier_channels" => m.classifier.channels = list(key, v)?,
            "n_classes" => {
                s.n_classes = num(key, v)?;
                m.classifier.n_classes = s.n_classes;
            }
            "lambda" => t.gan.lambda = num(key, v)?,
            "critic_steps" => t.gan.critic_steps = num(key, v)?,
            "preset" => {
                let p = preset(v)?;
                t.adam = p.adam;
                t.batch_size = p.batch_size;
                t.epochs = p.epochs;
                self.preset = p.name.to_string();
            }
            "learning_rate" => t.adam.learning_rate = num(key, v)?,
            "beta1" => t.adam.beta1 = num(key, v)?,
            "beta2" => t.adam.beta2 = num(key, v)?,
            "epsilon" => t.adam.epsilon = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "steps_a" => t.steps_a = num(key, v)?,
            "steps_b" => t.steps_b = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "eval_every" => t.eval_every = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "delta_floor" => t.delta_floor = num(key, v)?,
            "clip_samples" => s.clip_samples = num(key, v)?,
            "tone_amplitude" => s.tone_amplitude = num(key, v)?,
            "band_rms" => s.band_rms = num(key, v)?,
            "snr_db" => s.snr_db = num(key, v)?,
            "unseen_snr_db" => s.unseen_snr_db = num(key, v)?,
            "unseen_detune" => s.unseen_detune = num(key, v)?,
            "pixel_noise" => s.pixel_noise = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let f = &self.features;
        let t = &self.train;
        let m = &t.model;
        let s = &self.synthetic;
        Some(match key {
            "sample_rate" => f.sample_rate.to_string(),
            "fft_size" => f.stft.fft_size.to_string(),
            "hop_size" => f.stft.hop_size.to_string(),
            "window" => f.stft.window.to_string(),
            "n_mels" => f.n_mels.to_string(),
            "f_min" => f.f_min.to_string(),
            "f_max" => f.f_max.to_string(),
            "log_floor" => f.log_floor.to_string(),
            "delta_width" => f.delta_width.to_string(),
            "n_mfcc" => f.n_mfcc.to_string(),
            "features" => self.feature_set.to_string(),
            "k" => m.transform.k.to_string(),
            "d" => m.autoencoder.d.to_string(),
            "beta" => t.beta.to_string(),
            "dead_code_window" => t.dead_code_window.to_string(),
            "image_size" => m.autoencoder.input_size.to_string(),
            "encoder_channels" => join(&m.autoencoder.hidden),
            "latent_grid" => m.autoencoder.latent_grid.to_string(),
            "transform_channels" => join(&m.transform.channels),
            "variant" => m.transform.variant.to_string(),
            "discriminator_hidden" => join(&m.discriminator.hidden),
            "discriminator_activation" => m.discriminator.activation.to_string(),
            "classifier_channels" => join(&m.classifier.channels),
            "n_classes" => m.classifier.n_classes.to_string(),
            "lambda" => t.gan.lambda.to_string(),
            "critic_steps" => t.gan.critic_steps.to_string(),
            "preset" => self.preset.clone(),
            "learning_rate" => t.adam.learning_rate.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "epsilon" => t.adam.epsilon.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "steps_a" => t.steps_a.to_string(),
            "steps_b" => t.steps_b.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "seed" => t.seed.to_string(),
            "delta_floor" => t.delta_floor.to_string(),
            "clip_samples" => s.clip_samples.to_string(),
            "tone_amplitude" => s.tone_amplitude.to_string(),
            "band_rms" => s.band_rms.to_string(),
            "snr_db" => s.snr_db.to_string(),
            "unseen_snr_db" => s.unseen_snr_db.to_string(),
            "unseen_detune" => s.unseen_detune.to_string(),
            "pixel_noise" => s.pixel_noise.to_string(),
            _ => return None,
        })
    }

    /// Canonical text; parsing it back yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).expect("listed key")));
        }
        out
    }

    /// Fills derived sizes and validates everything, storing the echo.
    pub fn resolve(&mut self) -> Result<()> {
        self.features.stft.validate().map_err(cfg_err)?;
        self.features.filterbank().map_err(cfg_err)?;
        if self.features.n_mfcc == 0 || self.features.n_mfcc > self.features.n_mels {
            return Err(Error::Config(format!(
                "n_mfcc must be in 1..={}",
                self.features.n_mels
            )));
        }
        if self.synthetic.sample_rate != self.features.sample_rate {
            return Err(Error::Config("synthetic and feature sample rates differ".into()));
        }
        self.synthetic.validate().map_err(cfg_err)?;
        let set = self.feature_set;
        let frames = self
            .features
            .feature_frames(set, self.synthetic.clip_samples)
            .ok_or_else(|| Error::Config(format!("clip_samples too short for `{set}` features")))?;
        let m = &mut self.train.model;
        m.autoencoder.image_channels = 3;
        m.autoencoder.validate()?;
        let l = m.autoencoder.positions();
        let d = m.autoencoder.d;
        m.transform.frames = frames;
        m.transform.bins = self.features.feature_bins(set);
        m.transform.positions = l;
        m.transform.d = d;
        m.discriminator.input = l * d;
        m.classifier.height = l;
        m.classifier.width = d;
        self.train.validate()?;
        if self.train.steps_a == 0 && self.train.steps_b == 0 {
            log::warn!("both stage step counts are zero");
        }
        self.train.echo = String::new();
        self.train.echo = self.to_text();
        Ok(())
    }
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_the_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.features.stft.fft_size, 1024);
        assert_eq!(c.features.stft.hop_size, 512);
        assert_eq!(c.features.n_mels, 64);
        assert_eq!(c.features.n_mfcc, 13);
        assert_eq!(c.train.beta, 0.25);
        assert_eq!(c.train.gan.lambda, 10.0);
        assert_eq!(c.train.gan.critic_steps, 5);
        assert_eq!(c.train.adam.beta1, 0.5);
        assert_eq!(c.train.adam.beta2, 0.999);
        assert_eq!(c.train.adam.learning_rate, 3e-4);
        assert_eq!(c.train.checkpoint_every, 500);
        assert_eq!(c.train.dead_code_window, 1000);
        assert_eq!(c.train.model.k(), 64);
        assert_eq!(c.train.model.positions(), 64);
        assert_eq!(c.train.model.d(), 16);
        assert_eq!(c.train.model.transform.frames, 32);
        assert_eq!(c.train.model.transform.bins, 64);
        assert_eq!(KEYS.len(), KEYS.iter().filter(|k| c.get(k).is_some()).count());
    }

    #[test]
    fn text_roundtrip() {
        let c = RunConfig::from_text("variant = no-vq\nk = 32 # smaller\nencoder_channels = 8,8,8\n").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.echo, c.to_text());
        assert_eq!(c.train.model.autoencoder.hidden, vec![8, 8, 8]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let e = RunConfig::from_text("bogus = 1").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        assert!(RunConfig::from_text("k = many").is_err());
        assert!(RunConfig::from_text("beta1 = 1.5").is_err());
        assert!(RunConfig::from_text("features = spectrogram").is_err());
        assert!(RunConfig::from_text("just words").is_err());
        assert!(RunConfig::from_text("image_size = 24").is_err());
    }

    #[test]
    fn later_layers_win_and_presets_sit_below_explicit_keys() {
        let file = parse_text("learning_rate = 0.01\npreset = paper-s41\nseed = 3").unwrap();
        let cli = vec![("seed".to_string(), "9".to_string())];
        let c = RunConfig::from_layers(&[file, cli]).unwrap();
        assert_eq!(c.train.adam.learning_rate, 0.01);
        assert_eq!(c.train.batch_size, 640);
        assert_eq!(c.train.epochs, 5000);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.preset, "paper-s41");
    }

    #[test]
    fn feature_set_drives_transform_input() {
        let c = RunConfig::from_text("features = stacked").unwrap();
        assert_eq!(c.train.model.transform.bins, 192);
        assert_eq!(c.train.model.transform.frames, 32 - 8);
    }
}
