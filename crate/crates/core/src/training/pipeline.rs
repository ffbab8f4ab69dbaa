use super::checkpoint::Checkpoint;
use super::history::LossRecord;
use super::model::{Model, ModelConfig, Networks, Optimizers};
use super::optim::{Adam, AdamConfig};
use super::stats::{reconstruction_loss, DatasetStatistics, DELTA_FLOOR};
use super::synthetic::AvPair;
use crate::adversarial::{
    critic_objective, generator_adv_loss, gradient_penalty, interpolate, sample_weights, GanLossConfig,
};
use crate::error::{invalid, Error, Result};
use crate::networks::{argmax_rows, ParamSet};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::vq::{quantize, straight_through, vq_losses, UsageTracker};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Optimization settings shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub gan: GanLossConfig,
    /// Commitment weight.
    pub beta: f64,
    pub batch_size: usize,
    /// Caps the step count at `epochs` passes over the data; 0 means no cap.
    pub epochs: u64,
    pub steps_a: u64,
    pub steps_b: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Stage-B validation cadence.
    pub eval_every: u64,
    pub dead_code_window: u64,
    pub delta_floor: f64,
    /// Text stored in every checkpoint.
    pub echo: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            gan: GanLossConfig::default(),
            beta: 0.25,
            batch_size: 16,
            epochs: 0,
            steps_a: 500,
            steps_b: 2000,
            seed: 7,
            checkpoint_every: 500,
            eval_every: 100,
            dead_code_window: 1000,
            delta_floor: DELTA_FLOOR,
            echo: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        self.gan.validate()?;
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.delta_floor > 0.0) {
            return Err(Error::Config("delta_floor must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self, requested: u64, n: usize) -> u64 {
        if self.epochs == 0 {
            return requested;
        }
        let per_epoch = (n / self.batch_size.min(n)).max(1) as u64;
        requested.min(self.epochs.saturating_mul(per_epoch))
    }
}

/// Epoch-wise shuffled minibatches; the tail of each permutation that does
/// not fill a batch is dropped.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.order[self.pos - self.batch..self.pos]
    }
}

fn stack(items: &[&Tensor], prefix: &[usize]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| invalid("cannot stack an empty batch"))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        if t.shape() != first.as_slice() {
            return Err(invalid(format!("batch item {:?} vs {first:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(prefix);
    shape.extend_from_slice(&first);
    Tensor::new(shape, data)
}

fn grads_for(g: &Gradients, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| g.or_zeros(tape, v)).collect()
}

fn check_pairs(data: &[AvPair], cfg: &ModelConfig, need_image: bool) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("no training pairs"));
    }
    let ae = &cfg.autoencoder;
    let img = [ae.image_channels, ae.input_size, ae.input_size];
    for (i, p) in data.iter().enumerate() {
        if need_image && p.image.shape() != img {
            return Err(invalid(format!(
                "pair {i}: image {:?}, model expects {img:?}",
                p.image.shape()
            )));
        }
        if p.audio.frames() != cfg.transform.frames || p.audio.bins() != cfg.transform.bins {
            return Err(invalid(format!(
                "pair {i}: audio {}x{}, model expects {}x{}",
                p.audio.frames(),
                p.audio.bins(),
                cfg.transform.frames,
                cfg.transform.bins
            )));
        }
    }
    Ok(())
}

fn audio_norm(data: &[AvPair]) -> [f64; 2] {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for p in data {
        for &v in p.audio.data() {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    [mean, var.sqrt().max(1e-6)]
}

/// Result of stage A.
#[derive(Clone, Debug)]
pub struct StageAOutput {
    pub model: Model,
    pub optimizers: Optimizers,
    pub history: Vec<LossRecord>,
    pub checkpoint: Checkpoint,
    /// Prototypes idle for the whole usage window at the end of training.
    pub dead_codes: Vec<usize>,
}

struct StageA<'a> {
    cfg: &'a TrainConfig,
    nets: Networks,
    model: Model,
    adam_enc: Adam,
    adam_dec: Adam,
    adam_cb: Adam,
    adam_g: Adam,
    adam_d: Adam,
    inv_delta: Tensor,
}

struct AeStep {
    recon: f64,
    codebook: f64,
    commit: f64,
    real: Tensor,
    indices: Option<Vec<usize>>,
}

impl StageA<'_> {
    fn uses_codebook(&self) -> bool {
        self.cfg.model.transform.variant.uses_codebook()
    }

    fn flat(&self) -> usize {
        self.cfg.model.positions() * self.cfg.model.d()
    }

    fn autoencoder_step(&mut self, images: Tensor) -> Result<AeStep> {
        let mut tape = Tape::new();
        let ep = self.model.encoder.bind(&mut tape, true);
        let dp = self.model.decoder.bind(&mut tape, true);
        let b = images.shape()[0];
        let img = tape.constant(images);
        let inv = tape.constant(self.inv_delta.clone());
        let e = self.nets.encoder.forward(&mut tape, &ep, img)?;
        let step = if self.uses_codebook() {
            let cbv = tape.var(self.model.codebook.prototypes().clone());
            let qz = quantize(tape.value(e), &self.model.codebook)?;
            let q = tape.embedding_lookup(cbv, &qz.indices)?;
            let (lc, lm) = vq_losses(&mut tape, e, q, self.cfg.beta)?;
            let st = straight_through(&mut tape, e, q)?;
            let rec = self.nets.decoder.forward(&mut tape, &dp, st)?;
            let lr = reconstruction_loss(&mut tape, img, rec, inv)?;
            let sum = tape.add(lr, lc)?;
            let total = tape.add(sum, lm)?;
            let g = tape.backward(total)?;
            let cb_grad = g.or_zeros(&tape, cbv);
            let mut cb = ParamSet::new();
            cb.push("codebook", self.model.codebook.prototypes().clone());
            self.adam_cb.step(&mut cb, &[cb_grad])?;
            self.model.codebook.set_prototypes(cb.tensors()[0].clone())?;
            self.adam_enc.step(&mut self.model.encoder, &grads_for(&g, &tape, &ep))?;
            self.adam_dec.step(&mut self.model.decoder, &grads_for(&g, &tape, &dp))?;
            AeStep {
                recon: tape.value(lr).item(),
                codebook: tape.value(lc).item(),
                commit: tape.value(lm).item(),
                real: tape.value(q).clone(),
                indices: Some(qz.indices),
            }
        } else {
            let rec = self.nets.decoder.forward(&mut tape, &dp, e)?;
            let lr = reconstruction_loss(&mut tape, img, rec, inv)?;
            let g = tape.backward(lr)?;
            self.adam_enc.step(&mut self.model.encoder, &grads_for(&g, &tape, &ep))?;
            self.adam_dec.step(&mut self.model.decoder, &grads_for(&g, &tape, &dp))?;
            AeStep {
                recon: tape.value(lr).item(),
                codebook: 0.0,
                commit: 0.0,
                real: tape.value(e).clone(),
                indices: None,
            }
        };
        Ok(AeStep {
            real: step.real.reshape(&[b, self.flat()])?,
            ..step
        })
    }

    /// Generator features `[B, L*d]` with `G` trainable or frozen.
    fn generate(&self, tape: &mut Tape, audio: &Tensor, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let gp = self.model.transform.bind(tape, trainable);
        let av = tape.constant(audio.clone());
        let cb = if self.uses_codebook() {
            let b = tape.constant(self.model.codebook.prototypes().clone());
            Some((b, &self.model.codebook))
        } else {
            None
        };
        let f = self.nets.transform.train_features(tape, &gp, av, cb)?;
        let f = tape.reshape(f, &[audio.shape()[0], self.flat()])?;
        Ok((f, gp))
    }

    fn critic_step(&mut self, real: &Tensor, fake: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64> {
        let w = sample_weights(real.shape()[0], rng);
        let c = interpolate(fake, real, &w)?;
        let mut tape = Tape::new();
        let dp = self.model.discriminator.bind(&mut tape, true);
        let rv = tape.constant(real.clone());
        let fv = tape.constant(fake.clone());
        let cv = tape.var(c);
        let disc = &self.nets.discriminator;
        let dr = disc.forward(&mut tape, &dp, rv)?;
        let df = disc.forward(&mut tape, &dp, fv)?;
        let gp = gradient_penalty(&mut tape, |t, x| disc.forward(t, &dp, x), cv, self.cfg.gan.lambda)?;
        let obj = critic_objective(&mut tape, dr, df, gp)?;
        let loss = tape.scale(obj, -1.0);
        let g = tape.backward(loss)?;
        self.adam_d
            .step(&mut self.model.discriminator, &grads_for(&g, &tape, &dp))?;
        Ok(tape.value(obj).item())
    }

    fn generator_step(&mut self, audio: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (f, gp) = self.generate(&mut tape, audio, true)?;
        let dp = self.model.discriminator.bind(&mut tape, false);
        let s = self.nets.discriminator.forward(&mut tape, &dp, f)?;
        let loss = generator_adv_loss(&mut tape, s);
        let g = tape.backward(loss)?;
        self.adam_g.step(&mut self.model.transform, &grads_for(&g, &tape, &gp))?;
        Ok(tape.value(loss).item())
    }

    fn optimizers(&self) -> Optimizers {
        let mut groups = vec![
            ("enc".to_string(), self.adam_enc.clone()),
            ("dec".to_string(), self.adam_dec.clone()),
        ];
        if self.uses_codebook() {
            groups.push(("codebook".into(), self.adam_cb.clone()));
        }
        groups.push(("g".into(), self.adam_g.clone()));
        groups.push(("d".into(), self.adam_d.clone()));
        Optimizers { groups }
    }

    fn snapshot(&self, step: u64) -> Checkpoint {
        let mut model = self.model.clone();
        model.round_to_f32();
        model.to_checkpoint(step, &self.cfg.echo, Some(&self.optimizers()))
    }
}

/// Stage A: trains encoder, decoder, codebook, `G` and `D` on paired data.
///
/// `on_checkpoint` receives a snapshot every `checkpoint_every` steps.
/// The returned model is rounded to `f32`, matching its checkpoint.
pub fn train_stage_a(
    data: &[AvPair],
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<StageAOutput> {
    cfg.validate()?;
    check_pairs(data, &cfg.model, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stats = DatasetStatistics::from_images(data.iter().map(|p| &p.image), cfg.delta_floor)?;
    let inv_delta = stats.inverse();
    let model = Model::init(&cfg.model, stats, audio_norm(data), &mut rng)?;
    let audio: Vec<Tensor> = data
        .iter()
        .map(|p| model.audio_input(&p.audio))
        .collect::<Result<_>>()?;
    let mut cb = ParamSet::new();
    cb.push("codebook", model.codebook.prototypes().clone());
    let mut st = StageA {
        cfg,
        nets: Networks::new(&cfg.model)?,
        adam_enc: Adam::new(cfg.adam, &model.encoder),
        adam_dec: Adam::new(cfg.adam, &model.decoder),
        adam_cb: Adam::new(cfg.adam, &cb),
        adam_g: Adam::new(cfg.adam, &model.transform),
        adam_d: Adam::new(cfg.adam, &model.discriminator),
        model,
        inv_delta,
    };

    let steps = cfg.steps(cfg.steps_a, data.len());
    let mut batcher = Batcher::new(data.len(), cfg.batch_size);
    let mut usage = UsageTracker::new(cfg.model.k(), cfg.dead_code_window);
    let mut history = Vec::with_capacity(steps as usize);
    let start = Instant::now();
    for step in 1..=steps {
        let idx = batcher.next(&mut rng).to_vec();
        let images = stack(&idx.iter().map(|&i| &data[i].image).collect::<Vec<_>>(), &[])?;
        let audio_b = stack(&idx.iter().map(|&i| &audio[i]).collect::<Vec<_>>(), &[])?;

        let ae = st.autoencoder_step(images)?;
        if let Some(ix) = &ae.indices {
            usage.record(step, ix);
        }
        let fake = {
            let mut tape = Tape::new();
            let (f, _) = st.generate(&mut tape, &audio_b, false)?;
            tape.value(f).clone()
        };
        let mut l_d = f64::NAN;
        for _ in 0..cfg.gan.critic_steps {
            l_d = st.critic_step(&ae.real, &fake, &mut rng)?;
        }
        let g_adv = st.generator_step(&audio_b)?;

        let rec = LossRecord {
            step,
            recon: ae.recon,
            codebook: ae.codebook,
            commit: ae.commit,
            l_d,
            g_adv,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(term) = rec.non_finite_term() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                step,
            });
        }
        if step % 50 == 0 || step == 1 {
            log::info!(
                "stage A step {step}/{steps}: recon {:.4} codebook {:.4} commit {:.4} L_D {:.4} L_G {:.4}",
                rec.recon,
                rec.codebook,
                rec.commit,
                rec.l_d,
                rec.g_adv
            );
        }
        history.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            on_checkpoint(&st.snapshot(step))?;
        }
    }
    if !st.model.is_finite() {
        return Err(Error::NonFinite {
            term: "parameters".into(),
            step: steps,
        });
    }
    let checkpoint = st.snapshot(steps);
    let mut optimizers = st.optimizers();
    for (_, a) in &mut optimizers.groups {
        a.round_to_f32();
    }
    let mut model = st.model;
    model.round_to_f32();
    let dead_codes = if cfg.model.transform.variant.uses_codebook() {
        usage.dead(steps)
    } else {
        Vec::new()
    };
    Ok(StageAOutput {
        model,
        optimizers,
        history,
        checkpoint,
        dead_codes,
    })
}

/// Hard inference features `[L, d]` from the frozen `G` for each pair.
pub fn ivf_features(model: &Model, data: &[AvPair]) -> Result<Vec<Tensor>> {
    check_pairs(data, &model.config, false)?;
    let nets = model.networks()?;
    let cb = model
        .config
        .transform
        .variant
        .uses_codebook()
        .then_some(&model.codebook);
    let (l, d) = (model.config.positions(), model.config.d());
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let inputs = chunk
            .iter()
            .map(|p| model.audio_input(&p.audio))
            .collect::<Result<Vec<_>>>()?;
        let a = stack(&inputs.iter().collect::<Vec<_>>(), &[])?;
        let (f, _) = nets.transform.infer(&model.transform, &a, cb)?;
        for rows in f.data().chunks(l * d) {
            out.push(Tensor::new(vec![l, d], rows.to_vec())?);
        }
    }
    Ok(out)
}

fn labels_of(data: &[AvPair], n_classes: usize) -> Result<Vec<usize>> {
    data.iter()
        .enumerate()
        .map(|(i, p)| match p.label {
            Some(c) if c < n_classes => Ok(c),
            Some(c) => Err(invalid(format!("pair {i}: label {c} >= {n_classes} classes"))),
            None => Err(invalid(format!("pair {i} has no label"))),
        })
        .collect()
}

fn predict_features(model: &Model, params: &ParamSet, feats: &[Tensor]) -> Result<Vec<usize>> {
    let nets = model.networks()?;
    let mut out = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(64) {
        let x = stack(&chunk.iter().collect::<Vec<_>>(), &[])?;
        let rows = x.shape()[0] * x.shape()[1];
        let x = x.reshape(&[rows, model.config.d()])?;
        out.extend(argmax_rows(&nets.classifier.predict_proba(params, &x)?));
    }
    Ok(out)
}

/// One logged stage-B step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierRecord {
    pub step: u64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StageBOutput {
    /// Stage-A components untouched, classifier set to the best snapshot.
    pub model: Model,
    pub history: Vec<ClassifierRecord>,
    pub best_val_accuracy: f64,
    pub best_step: u64,
    pub classifier_optimizer: Adam,
}

/// Stage B: trains the classifier on hard features of the frozen `G`.
///
/// The classifier with the best validation accuracy is kept; training stops
/// early once validation accuracy reaches 1. Without validation pairs the
/// last classifier is kept.
pub fn train_stage_b(train: &[AvPair], val: &[AvPair], model: &Model, cfg: &TrainConfig) -> Result<StageBOutput> {
    cfg.validate()?;
    let n_classes = model.config.classifier.n_classes;
    let labels = labels_of(train, n_classes)?;
    let val_labels = labels_of(val, n_classes)?;
    let feats = ivf_features(model, train)?;
    let val_feats = if val.is_empty() {
        Vec::new()
    } else {
        ivf_features(model, val)?
    };
    let nets = model.networks()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut params = nets.classifier.init(&mut rng);
    let mut adam = Adam::new(cfg.adam, &params);
    let steps = cfg.steps(cfg.steps_b, train.len());
    let mut batcher = Batcher::new(train.len(), cfg.batch_size);
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0u64, params.clone());
    let d = model.config.d();
    for step in 1..=steps {
        let idx = batcher.next(&mut rng).to_vec();
        let x = stack(&idx.iter().map(|&i| &feats[i]).collect::<Vec<_>>(), &[])?;
        let rows = x.shape()[0] * x.shape()[1];
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let xv = tape.constant(x.reshape(&[rows, d])?);
        let logits = nets.classifier.logits(&mut tape, &p, xv)?;
        let loss = tape.cross_entropy(logits, &y)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                term: "classifier cross-entropy".into(),
                step,
            });
        }
        let g = tape.backward(loss)?;
        adam.step(&mut params, &grads_for(&g, &tape, &p))?;

        let mut rec = ClassifierRecord {
            step,
            loss: lv,
            val_accuracy: None,
        };
        if !val.is_empty() && (step % cfg.eval_every == 0 || step == steps) {
            let pred = predict_features(model, &params, &val_feats)?;
            let acc = accuracy(&pred, &val_labels);
            rec.val_accuracy = Some(acc);
            log::info!("stage B step {step}/{steps}: loss {lv:.4} val accuracy {acc:.3}");
            if acc > best.0 {
                best = (acc, step, params.clone());
            }
        }
        history.push(rec);
        if best.0 >= 1.0 {
            break;
        }
    }
    let last = history.last().map_or(0, |r| r.step);
    if val.is_empty() || history.is_empty() {
        best = (f64::NAN, last, params);
    }
    let mut out = model.clone();
    let mut cls = best.2;
    cls.round_to_f32();
    out.classifier = Some(cls);
    adam.round_to_f32();
    Ok(StageBOutput {
        model: out,
        history,
        best_val_accuracy: best.0,
        best_step: best.1,
        classifier_optimizer: adam,
    })
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy and confusion matrix (`confusion[true][predicted]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub split: String,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut s = String::from("true\\predicted");
        for j in 0..n {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn score_predictions(predicted: &[usize], labels: &[usize], n_classes: usize, split: &str) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(invalid(format!("split `{split}` is empty")));
    }
    if predicted.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(invalid(format!("class id out of range for {n_classes} classes")));
        }
        confusion[l][p] += 1;
    }
    Ok(Evaluation {
        split: split.to_string(),
        accuracy: accuracy(predicted, labels),
        confusion,
    })
}

/// Classifier predictions for each pair.
pub fn predict(model: &Model, data: &[AvPair]) -> Result<Vec<usize>> {
    let cls = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::InvalidCheckpoint("checkpoint has no classifier".into()))?;
    if data.is_empty() {
        return Ok(Vec::new());
    }
    predict_features(model, cls, &ivf_features(model, data)?)
}

pub fn evaluate(model: &Model, data: &[AvPair], split: &str) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(invalid(format!("split `{split}` is empty")));
    }
    let n = model.config.classifier.n_classes;
    let labels = labels_of(data, n)?;
    let pred = predict(model, data)?;
    score_predictions(&pred, &labels, n, split)
}
