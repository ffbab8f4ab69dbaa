//! Encoder, decoder, transformation network, critic and classifier.
//!
//! Networks are stateless descriptions. Their parameters live in a
//! [`ParamSet`] that is bound onto a [`Tape`] for each step, so the same
//! weights can be trained, frozen or evaluated without copying the model.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vq::{self, Codebook};
use rand::Rng;
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

const LEAK: f64 = 0.2;
const KERNEL: usize = 3;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.var(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// SHA-256 over names, shapes and the `f32` image of the values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v as f32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn expect_params(net: &'static str, p: &[Var], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(invalid(format!("{net} expects {n} parameter tensors, got {}", p.len())));
    }
    Ok(())
}

fn conv_params<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) {
    let fan_in = (cin * KERNEL * KERNEL) as f64;
    ps.push(
        format!("{name}.w"),
        Tensor::randn(&[cout, cin, KERNEL, KERNEL], (2.0 / fan_in).sqrt(), rng),
    );
    ps.push(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn dense_params<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) {
    ps.push(
        format!("{name}.w"),
        Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
    );
    ps.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn conv(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let y = tape.conv2d_same(x, w, stride)?;
    tape.add_channel_bias(y, b)
}

fn check_image(tape: &Tape, net: &'static str, x: Var, c: usize, h: usize, w: usize) -> Result<usize> {
    match tape.shape(x) {
        [b, c2, h2, w2] if *c2 == c && *h2 == h && *w2 == w => Ok(*b),
        s => Err(shape_err(net, format!("expected [B,{c},{h},{w}], got {s:?}"))),
    }
}

/// Number of 2x resampling stages between `size` and `grid`.
fn octaves(size: usize, grid: usize) -> Option<usize> {
    if grid == 0 || !size.is_multiple_of(grid) || !(size / grid).is_power_of_two() {
        return None;
    }
    Some((size / grid).trailing_zeros() as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub input_size: usize,
    pub image_channels: usize,
    /// Hidden widths; the encoder has `hidden.len() + 1` conv layers.
    pub hidden: Vec<usize>,
    pub latent_grid: usize,
    pub d: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            image_channels: 3,
            hidden: vec![16, 32, 32],
            latent_grid: 8,
            d: 16,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let layers = self.hidden.len() + 1;
        let Some(s) = octaves(self.input_size, self.latent_grid) else {
            return Err(Error::Config(format!(
                "latent grid {} must divide image size {} by a power of two",
                self.latent_grid, self.input_size
            )));
        };
        if s > layers {
            return Err(Error::Config(format!(
                "{layers} conv layers cannot reduce {} to {}",
                self.input_size, self.latent_grid
            )));
        }
        if self.d == 0 || self.image_channels == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Quantized positions per image.
    pub fn positions(&self) -> usize {
        self.latent_grid * self.latent_grid
    }

    fn octaves(&self) -> usize {
        octaves(self.input_size, self.latent_grid).unwrap_or(0)
    }
}

/// Maps `[B,C,S,S]` images to `[B*L, d]` embeddings, rows ordered by image
/// then raster position.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: AutoencoderConfig,
}

impl Encoder {
    pub fn new(cfg: AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.cfg.image_channels];
        w.extend(&self.cfg.hidden);
        w.push(self.cfg.d);
        w
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        for (i, pair) in self.widths().windows(2).enumerate() {
            conv_params(&mut ps, &format!("enc.conv{i}"), pair[0], pair[1], rng);
        }
        ps
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], img: Var) -> Result<Var> {
        let c = &self.cfg;
        let layers = c.hidden.len() + 1;
        expect_params("encoder", p, 2 * layers)?;
        check_image(tape, "encoder", img, c.image_channels, c.input_size, c.input_size)?;
        let down = self.cfg.octaves();
        let mut x = img;
        for i in 0..layers {
            let stride = if i < down { 2 } else { 1 };
            x = conv(tape, x, p[2 * i], p[2 * i + 1], stride)?;
            if i + 1 < layers {
                x = tape.leaky_relu(x, LEAK);
            }
        }
        tape.channels_last(x)
    }
}

/// Maps `[B*L, d]` latent rows back to `[B,C,S,S]` images.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: AutoencoderConfig,
}

impl Decoder {
    pub fn new(cfg: AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.cfg.d];
        w.extend(self.cfg.hidden.iter().rev());
        w.push(self.cfg.image_channels);
        w
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        for (i, pair) in self.widths().windows(2).enumerate() {
            conv_params(&mut ps, &format!("dec.conv{i}"), pair[0], pair[1], rng);
        }
        ps
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], q: Var) -> Result<Var> {
        let c = &self.cfg;
        let layers = c.hidden.len() + 1;
        expect_params("decoder", p, 2 * layers)?;
        let g = c.latent_grid;
        let b = match tape.shape(q) {
            [rows, d] if *d == c.d && rows % (g * g) == 0 => rows / (g * g),
            s => {
                return Err(shape_err(
                    "decoder",
                    format!("expected [B*{}, {}], got {s:?}", g * g, c.d),
                ))
            }
        };
        let up_from = layers - c.octaves();
        let mut x = tape.channels_first(q, b, g, g)?;
        for i in 0..layers {
            if i >= up_from {
                x = tape.upsample2x(x)?;
            }
            x = conv(tape, x, p[2 * i], p[2 * i + 1], 1)?;
            if i + 1 < layers {
                x = tape.leaky_relu(x, LEAK);
            }
        }
        Ok(x)
    }
}

/// The three transformation network variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Logits over the codebook per position.
    IndexOutput,
    /// Vectors snapped to their nearest prototype.
    QuantizedOutput,
    /// Vectors used as they are.
    NoVq,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoVq, Variant::QuantizedOutput, Variant::IndexOutput];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IndexOutput => "ivf",
            Variant::QuantizedOutput => "ivf-q",
            Variant::NoVq => "no-vq",
        }
    }

    pub fn uses_codebook(self) -> bool {
        self != Variant::NoVq
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ivf" | "index" | "index-output" => Ok(Variant::IndexOutput),
            "ivf-q" | "quantized" | "quantized-output" => Ok(Variant::QuantizedOutput),
            "no-vq" | "novq" | "ivf-no-vq" => Ok(Variant::NoVq),
            other => Err(invalid(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformConfig {
    pub variant: Variant,
    pub frames: usize,
    pub bins: usize,
    /// Widths of the stride-2 conv stack.
    pub channels: Vec<usize>,
    pub positions: usize,
    pub k: usize,
    pub d: usize,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            variant: Variant::IndexOutput,
            frames: 32,
            bins: 64,
            channels: vec![8, 16, 16, 32],
            positions: 64,
            k: 64,
            d: 16,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.bins == 0 || self.positions == 0 || self.d == 0 {
            return Err(Error::Config("transform sizes must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("transform needs positive conv widths".into()));
        }
        if self.variant == Variant::IndexOutput && self.k < 2 {
            return Err(Error::Config("index output needs K >= 2".into()));
        }
        Ok(())
    }

    /// Spatial extent after the conv stack.
    pub fn conv_output(&self) -> (usize, usize) {
        let mut h = self.frames;
        let mut w = self.bins;
        for _ in &self.channels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Columns per position emitted by the head.
    pub fn head_width(&self) -> usize {
        match self.variant {
            Variant::IndexOutput => self.k,
            _ => self.d,
        }
    }
}

/// `G`: feature matrices `[B,1,T,F]` to per-position logits or vectors.
#[derive(Clone, Debug)]
pub struct Transform {
    cfg: TransformConfig,
}

impl Transform {
    pub fn new(cfg: TransformConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &TransformConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut cin = 1;
        for (i, &c) in self.cfg.channels.iter().enumerate() {
            conv_params(&mut ps, &format!("g.conv{i}"), cin, c, rng);
            cin = c;
        }
        let (h, w) = self.cfg.conv_output();
        let out = self.cfg.positions * self.cfg.head_width();
        dense_params(&mut ps, "g.head", cin * h * w, out, 1.0, rng);
        ps
    }

    /// Head output as `[B*L, K]` logits or `[B*L, d]` vectors.
    pub fn raw(&self, tape: &mut Tape, p: &[Var], a: Var) -> Result<Var> {
        let c = &self.cfg;
        let layers = c.channels.len();
        expect_params("transform", p, 2 * layers + 2)?;
        let b = check_image(tape, "transform", a, 1, c.frames, c.bins)?;
        let mut x = a;
        for i in 0..layers {
            x = conv(tape, x, p[2 * i], p[2 * i + 1], 2)?;
            x = tape.leaky_relu(x, LEAK);
        }
        let flat: usize = tape.shape(x)[1..].iter().product();
        let x = tape.reshape(x, &[b, flat])?;
        let y = tape.linear(x, p[2 * layers], p[2 * layers + 1])?;
        tape.reshape(y, &[b * c.positions, c.head_width()])
    }

    /// Differentiable features used while training: the expected prototype
    /// `softmax(logits) B` for index output, straight-through quantization
    /// for quantized output, raw vectors otherwise. `codebook` is a `[K,d]`
    /// node; pass `None` for the no-VQ variant.
    pub fn train_features(
        &self,
        tape: &mut Tape,
        p: &[Var],
        a: Var,
        codebook: Option<(Var, &Codebook)>,
    ) -> Result<Var> {
        let out = self.raw(tape, p, a)?;
        match (self.cfg.variant, codebook) {
            (Variant::NoVq, _) => Ok(out),
            (Variant::IndexOutput, Some((b, _))) => expected_prototype(tape, out, b),
            (Variant::QuantizedOutput, Some((_, cb))) => {
                let q = vq::quantize(tape.value(out), cb)?;
                let qv = tape.constant(q.vectors);
                tape.straight_through(out, qv)
            }
            (v, None) => Err(invalid(format!("variant {v} needs the codebook"))),
        }
    }

    /// Hard features at inference: argmax lookup, nearest-prototype snap or
    /// raw vectors. Returns the `[B*L, d]` features and, for codebook
    /// variants, the chosen indices.
    pub fn infer(
        &self,
        params: &ParamSet,
        a: &Tensor,
        cb: Option<&Codebook>,
    ) -> Result<(Tensor, Option<Vec<usize>>)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let av = tape.constant(a.clone());
        let out = self.raw(&mut tape, &p, av)?;
        let out = tape.value(out);
        match (self.cfg.variant, cb) {
            (Variant::NoVq, _) => Ok((out.clone(), None)),
            (Variant::IndexOutput, Some(cb)) => {
                let idx = argmax_rows(out);
                Ok((vq::lookup(cb, &idx)?, Some(idx)))
            }
            (Variant::QuantizedOutput, Some(cb)) => {
                let q = vq::quantize(out, cb)?;
                Ok((q.vectors, Some(q.indices)))
            }
            (v, None) => Err(invalid(format!("variant {v} needs the codebook"))),
        }
    }
}

/// `softmax(logits) B`: each row is a convex combination of prototypes.
pub fn expected_prototype(tape: &mut Tape, logits: Var, codebook: Var) -> Result<Var> {
    let probs = tape.softmax(logits);
    tape.matmul(probs, codebook)
}

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    LeakyRelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "leaky-relu" | "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky-relu",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input: 64 * 16,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

/// Dense critic `[B, n] -> [B, 1]` built only from ops with second-order
/// support.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        if cfg.input == 0 || cfg.hidden.contains(&0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut fan_in = self.cfg.input;
        for (i, &h) in self.cfg.hidden.iter().enumerate() {
            dense_params(&mut ps, &format!("d.fc{i}"), fan_in, h, 1.0, rng);
            fan_in = h;
        }
        dense_params(&mut ps, "d.out", fan_in, 1, 1.0, rng);
        ps
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let layers = self.cfg.hidden.len();
        expect_params("discriminator", p, 2 * layers + 2)?;
        match tape.shape(x) {
            [_, n] if *n == self.cfg.input => {}
            s => {
                return Err(shape_err(
                    "discriminator",
                    format!("expected [B, {}], got {s:?}", self.cfg.input),
                ))
            }
        }
        let mut h = x;
        for i in 0..layers {
            h = tape.linear(h, p[2 * i], p[2 * i + 1])?;
            h = match self.cfg.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::LeakyRelu => tape.leaky_relu(h, LEAK),
            };
        }
        tape.linear(h, p[2 * layers], p[2 * layers + 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Input laid out as a one-channel `height x width` image.
    pub height: usize,
    pub width: usize,
    /// Exactly eight conv widths; a 2x2 mean pool follows every second conv.
    pub channels: Vec<usize>,
    pub n_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 16,
            channels: vec![16, 16, 32, 32, 64, 64, 128, 128],
            n_classes: 10,
        }
    }
}

impl ClassifierConfig {
    pub const CONV_LAYERS: usize = 8;
    pub const MEAN_POOLS: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != Self::CONV_LAYERS {
            return Err(Error::Config(format!(
                "classifier needs exactly {} conv widths, got {}",
                Self::CONV_LAYERS,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.n_classes < 2 {
            return Err(Error::Config(
                "classifier widths must be positive and n_classes >= 2".into(),
            ));
        }
        let min = 1 << Self::MEAN_POOLS;
        if self.height < min || self.width < min {
            return Err(Error::Config(format!(
                "classifier input {}x{} is too small for {} mean pools",
                self.height,
                self.width,
                Self::MEAN_POOLS
            )));
        }
        Ok(())
    }
}

/// Eight 3x3 convs, four 2x2 mean pools, a global max pool and a dense head.
#[derive(Clone, Debug)]
pub struct Classifier {
    cfg: ClassifierConfig,
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut cin = 1;
        for (i, &c) in self.cfg.channels.iter().enumerate() {
            conv_params(&mut ps, &format!("cls.conv{i}"), cin, c, rng);
            cin = c;
        }
        dense_params(&mut ps, "cls.head", cin, self.cfg.n_classes, 1.0, rng);
        ps
    }

    /// Logits `[B, n_classes]` for `[B*height, width]` feature rows.
    pub fn logits(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let c = &self.cfg;
        expect_params("classifier", p, 2 * ClassifierConfig::CONV_LAYERS + 2)?;
        let b = match tape.shape(x) {
            [rows, w] if *w == c.width && rows % c.height == 0 => rows / c.height,
            s => {
                return Err(shape_err(
                    "classifier",
                    format!("expected [B*{}, {}], got {s:?}", c.height, c.width),
                ))
            }
        };
        let mut h = tape.reshape(x, &[b, 1, c.height, c.width])?;
        for i in 0..ClassifierConfig::CONV_LAYERS {
            h = conv(tape, h, p[2 * i], p[2 * i + 1], 1)?;
            h = tape.leaky_relu(h, LEAK);
            if i % 2 == 1 {
                h = tape.mean_pool2x2(h)?;
            }
        }
        let pooled = tape.global_max_pool(h)?;
        let n = 2 * ClassifierConfig::CONV_LAYERS;
        tape.linear(pooled, p[n], p[n + 1])
    }

    /// Class probabilities for a batch of feature matrices.
    pub fn predict_proba(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let logits = self.logits(&mut tape, &p, xv)?;
        let probs = tape.softmax(logits);
        Ok(tape.value(probs).clone())
    }
}
