use super::checkpoint::Checkpoint;
use super::optim::Adam;
use super::stats::DatasetStatistics;
use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::networks::{
    AutoencoderConfig, Classifier, ClassifierConfig, Decoder, Discriminator, DiscriminatorConfig,
    Encoder, ParamSet, Transform, TransformConfig,
};
use crate::tensor::Tensor;
use crate::vq::Codebook;
use rand::Rng;

/// Architecture of every network, kept mutually consistent.
#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct ModelConfig {
    pub autoencoder: AutoencoderConfig,
    pub transform: TransformConfig,
    pub discriminator: DiscriminatorConfig,
    pub classifier: ClassifierConfig,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.transform.validate()?;
        self.classifier.validate()?;
        let l = self.autoencoder.positions();
        let d = self.autoencoder.d;
        let t = &self.transform;
        if t.positions != l || t.d != d {
            return Err(Error::Config(format!(
                "transform emits {} x {} but the latent grid holds {l} x {d}",
                t.positions, t.d
            )));
        }
        if t.k < 2 {
            return Err(Error::Config("codebook size K must be >= 2".into()));
        }
        if self.discriminator.input != l * d {
            return Err(Error::Config(format!(
                "discriminator input {} must equal L*d = {}",
                self.discriminator.input,
                l * d
            )));
        }
        if self.classifier.height != l || self.classifier.width != d {
            return Err(Error::Config(format!(
                "classifier input {}x{} must equal L x d = {l}x{d}",
                self.classifier.height, self.classifier.width
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.transform.k
    }

    pub fn positions(&self) -> usize {
        self.autoencoder.positions()
    }

    pub fn d(&self) -> usize {
        self.autoencoder.d
    }
}

/// Network descriptions built from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Networks {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub transform: Transform,
    pub discriminator: Discriminator,
    pub classifier: Classifier,
}

impl Networks {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: Encoder::new(cfg.autoencoder.clone())?,
            decoder: Decoder::new(cfg.autoencoder.clone())?,
            transform: Transform::new(cfg.transform.clone())?,
            discriminator: Discriminator::new(cfg.discriminator.clone())?,
            classifier: Classifier::new(cfg.classifier.clone())?,
        })
    }
}

/// All learned state of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub transform: ParamSet,
    pub discriminator: ParamSet,
    pub codebook: Codebook,
    pub classifier: Option<ParamSet>,
    pub stats: DatasetStatistics,
    /// Mean and standard deviation of the training audio features.
    pub audio_norm: [f64; 2],
}

/// Optimizer state per trained group.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Optimizers {
    pub groups: Vec<(String, Adam)>,
}

const PREFIXES: [(&str, &str); 5] = [
    ("encoder", "enc."),
    ("decoder", "dec."),
    ("transform", "g."),
    ("discriminator", "d."),
    ("classifier", "cls."),
];

impl Model {
    /// Fresh stage-A parameters drawn in a fixed order from `rng`.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        stats: DatasetStatistics,
        audio_norm: [f64; 2],
        rng: &mut R,
    ) -> Result<Self> {
        let nets = Networks::new(config)?;
        let encoder = nets.encoder.init(rng);
        let decoder = nets.decoder.init(rng);
        let codebook = Codebook::random(config.k(), config.d(), rng)?;
        let transform = nets.transform.init(rng);
        let discriminator = nets.discriminator.init(rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            transform,
            discriminator,
            codebook,
            classifier: None,
            stats,
            audio_norm,
        })
    }

    pub fn networks(&self) -> Result<Networks> {
        Networks::new(&self.config)
    }

    /// Normalized `[1, T, F]` input for the transformation network.
    pub fn audio_input(&self, f: &FeatureMatrix) -> Result<Tensor> {
        let [mu, sd] = self.audio_norm;
        let data = f.data().iter().map(|v| (v - mu) / sd).collect();
        Tensor::new(vec![1, f.frames(), f.bins()], data)
    }

    /// The stage-A components whose bits stage B must not change.
    pub fn frozen_checksums(&self) -> Vec<(&'static str, String)> {
        let mut cb = ParamSet::new();
        cb.push("codebook", self.codebook.prototypes().clone());
        let mut stats = ParamSet::new();
        stats.push("stats.delta_i", self.stats.delta_i.clone());
        vec![
            ("encoder", self.encoder.checksum()),
            ("decoder", self.decoder.checksum()),
            ("transform", self.transform.checksum()),
            ("discriminator", self.discriminator.checksum()),
            ("codebook", cb.checksum()),
            ("stats", stats.checksum()),
        ]
    }

    pub fn round_to_f32(&mut self) {
        self.encoder.round_to_f32();
        self.decoder.round_to_f32();
        self.transform.round_to_f32();
        self.discriminator.round_to_f32();
        if let Some(c) = &mut self.classifier {
            c.round_to_f32();
        }
        let cb = self.codebook.prototypes().map(|v| v as f32 as f64);
        self.codebook
            .set_prototypes(cb)
            .expect("rounding keeps the codebook shape");
        self.stats.delta_i = self.stats.delta_i.map(|v| v as f32 as f64);
        self.audio_norm = self.audio_norm.map(|v| v as f32 as f64);
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.decoder.is_finite()
            && self.transform.is_finite()
            && self.discriminator.is_finite()
            && self.codebook.prototypes().is_finite()
            && self.classifier.as_ref().is_none_or(ParamSet::is_finite)
    }

    pub fn to_checkpoint(&self, step: u64, config_echo: &str, opt: Option<&Optimizers>) -> Checkpoint {
        let mut ck = Checkpoint::new(step, config_echo);
        ck.push_params(&self.encoder);
        ck.push_params(&self.decoder);
        ck.push("codebook", self.codebook.prototypes().clone());
        ck.push_params(&self.transform);
        ck.push_params(&self.discriminator);
        if let Some(c) = &self.classifier {
            ck.push_params(c);
        }
        ck.push("stats.delta_i", self.stats.delta_i.clone());
        ck.push("stats.audio_norm", Tensor::from_vec(self.audio_norm.to_vec()));
        if let Some(opt) = opt {
            for (group, adam) in &opt.groups {
                ck.push(format!("opt.{group}.t"), Tensor::scalar(adam.t as f64));
                for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
                    ck.push(format!("opt.{group}.m{i}"), m.clone());
                    ck.push(format!("opt.{group}.v{i}"), v.clone());
                }
            }
        }
        ck
    }

    /// Rebuilds a model, checking every component against `config`.
    pub fn from_checkpoint(ck: &Checkpoint, config: &ModelConfig) -> Result<Self> {
        let nets = Networks::new(config)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let expect = [
            nets.encoder.init(&mut rng),
            nets.decoder.init(&mut rng),
            nets.transform.init(&mut rng),
            nets.discriminator.init(&mut rng),
            nets.classifier.init(&mut rng),
        ];
        let mut loaded = Vec::new();
        for ((what, prefix), template) in PREFIXES.iter().zip(&expect) {
            let ps = ck.params_with_prefix(prefix);
            if ps.is_empty() {
                loaded.push(None);
                continue;
            }
            if ps.names() != template.names() {
                return Err(Error::InvalidCheckpoint(format!(
                    "{what} parameters do not match the configured architecture"
                )));
            }
            for ((name, t), e) in ps.iter().zip(template.tensors()) {
                if t.shape() != e.shape() {
                    return Err(Error::InvalidCheckpoint(format!(
                        "`{name}` has shape {:?}, config expects {:?}",
                        t.shape(),
                        e.shape()
                    )));
                }
            }
            loaded.push(Some(ps));
        }
        let mut take = |i: usize| {
            loaded[i].take().ok_or_else(|| {
                Error::InvalidCheckpoint(format!("missing {} parameters", PREFIXES[i].0))
            })
        };
        let encoder = take(0)?;
        let decoder = take(1)?;
        let transform = take(2)?;
        let discriminator = take(3)?;
        let classifier = loaded[4].take();
        let cb = ck.require("codebook")?;
        if cb.shape() != [config.k(), config.d()] {
            return Err(Error::InvalidCheckpoint(format!(
                "codebook has shape {:?}, config expects [{}, {}]",
                cb.shape(),
                config.k(),
                config.d()
            )));
        }
        let codebook = Codebook::new(cb.clone()).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        let stats = DatasetStatistics::new(ck.require("stats.delta_i")?.clone())
            .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        let norm = ck.require("stats.audio_norm")?;
        if norm.len() != 2 || !(norm.data()[1] > 0.0) {
            return Err(Error::InvalidCheckpoint("bad audio normalization".into()));
        }
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            transform,
            discriminator,
            codebook,
            classifier,
            stats,
            audio_norm: [norm.data()[0], norm.data()[1]],
        })
    }
}
