use crate::{Cli, Command};
use ivf_core::audio;
use ivf_core::config::{parse_text, Layer, RunConfig};
use ivf_core::training::{
    evaluate, featurize, gen_synthetic, head_tail_means, read_dataset, shuffle_labels, train_stage_a,
    train_stage_b, write_dataset, write_loss_csv, AvPair, Checkpoint, Model, Optimizers, Split,
};
use ivf_core::Error;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Usage(_) => return 1,
            CliError::Core(e) | CliError::File { source: e, .. } => e,
        };
        match core {
            Error::Config(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn at<T>(path: &Path, r: ivf_core::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn io_at<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    at(path, r.map_err(Error::from))
}

fn file_layer(path: Option<&Path>) -> Result<Layer> {
    let Some(p) = path else {
        return Ok(Vec::new());
    };
    let text = io_at(p, fs::read_to_string(p))?;
    at(p, parse_text(&text))
}

fn load_config(path: Option<&Path>, cli: Layer) -> Result<RunConfig> {
    Ok(RunConfig::from_layers(&[file_layer(path)?, cli])?)
}

/// The checkpoint's recorded configuration with user overrides on top.
/// Overrides may change optimization settings but not the architecture or
/// the feature pipeline.
fn config_for_checkpoint(ck: &Checkpoint, path: Option<&Path>, cli: Layer) -> Result<RunConfig> {
    let recorded = parse_text(&ck.config)
        .map_err(|e| CliError::Core(Error::InvalidCheckpoint(format!("config echo: {e}"))))?;
    let base = RunConfig::from_layers(std::slice::from_ref(&recorded))?;
    let cfg = RunConfig::from_layers(&[recorded, file_layer(path)?, cli])?;
    if cfg.train.model != base.train.model
        || cfg.features != base.features
        || cfg.feature_set != base.feature_set
    {
        let diff: Vec<String> = cfg
            .to_text()
            .lines()
            .zip(base.to_text().lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("{a} (checkpoint: {})", b.split_once("= ").map_or(b, |x| x.1)))
            .collect();
        return Err(CliError::Core(Error::Config(format!(
            "configuration does not match the checkpoint: {}",
            diff.join("; ")
        ))));
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    at(path, Checkpoint::load(path))
}

fn load_pairs(path: &Path, cfg: &RunConfig) -> Result<Vec<AvPair>> {
    let f = io_at(path, File::open(path))?;
    let (h, clips) = at(path, read_dataset(BufReader::new(f)))?;
    let s = &cfg.synthetic;
    if h.sample_rate != s.sample_rate
        || h.clip_samples != s.clip_samples
        || h.image_size != s.image_size
        || h.n_classes != s.n_classes
    {
        return Err(CliError::File {
            path: path.to_path_buf(),
            source: Error::InvalidInput(format!(
                "dataset has {} Hz, {} samples, {}px images, {} classes; config expects {} Hz, {} samples, {}px, {} classes",
                h.sample_rate, h.clip_samples, h.image_size, h.n_classes,
                s.sample_rate, s.clip_samples, s.image_size, s.n_classes
            )),
        });
    }
    at(path, featurize(&clips, &cfg.features, cfg.feature_set))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    at(path, ck.save(path))
}

pub fn run(cli: Cli, layer: Layer) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Featurize { input, output } => {
            let cfg = load_config(cfg_path, layer)?;
            cmd_featurize(&input, &output, &cfg)
        }
        Command::GenSynthetic { output, count, split } => {
            let cfg = load_config(cfg_path, layer)?;
            let split: Split = split.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
            let clips = gen_synthetic(&cfg.synthetic, count, cfg.train.seed, split)?;
            let f = io_at(&output, File::create(&output))?;
            let mut w = BufWriter::new(f);
            at(&output, write_dataset(&mut w, &cfg.synthetic, &clips))?;
            io_at(&output, w.flush())?;
            println!(
                "wrote {count} {} clips ({} classes, seed {}) to {}",
                split.name(),
                cfg.synthetic.n_classes,
                cfg.train.seed,
                output.display()
            );
            Ok(())
        }
        Command::TrainAv { data, out_dir } => {
            let cfg = load_config(cfg_path, layer)?;
            cmd_train_av(&data, &out_dir, &cfg)
        }
        Command::TrainClassifier {
            checkpoint,
            data,
            val,
            output,
            shuffle_labels: shuffle,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = config_for_checkpoint(&ck, cfg_path, layer)?;
            cmd_train_classifier(&ck, &checkpoint, &data, val.as_deref(), &output, shuffle, &cfg)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            confusion,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = config_for_checkpoint(&ck, cfg_path, layer)?;
            let model = at(&checkpoint, Model::from_checkpoint(&ck, &cfg.train.model))?;
            let pairs = load_pairs(&data, &cfg)?;
            let ev = evaluate(&model, &pairs, &split)?;
            let correct: u64 = (0..ev.confusion.len()).map(|i| ev.confusion[i][i]).sum();
            println!(
                "variant {} split {}: accuracy {:.3} ({correct}/{})",
                cfg.train.model.transform.variant,
                ev.split,
                ev.accuracy,
                ev.total()
            );
            if let Some(p) = confusion {
                io_at(&p, fs::write(&p, ev.confusion_csv()))?;
            }
            Ok(())
        }
        Command::InspectCodebook { checkpoint, output } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cb = at(&checkpoint, ck.require("codebook"))?;
            let d = cb.shape()[1];
            let mut out = String::new();
            for row in cb.data().chunks(d) {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            io_at(&output, fs::write(&output, out))?;
            println!("wrote {} x {d} codebook to {}", cb.shape()[0], output.display());
            Ok(())
        }
    }
}

fn is_wav(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn cmd_featurize(input: &Path, output: &Path, cfg: &RunConfig) -> Result<()> {
    let (clips, single) = if input.is_dir() {
        let mut v: Vec<PathBuf> = io_at(input, fs::read_dir(input))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_wav(p))
            .collect();
        v.sort();
        (v, false)
    } else {
        (vec![input.to_path_buf()], true)
    };
    if clips.is_empty() {
        log::warn!("no WAV files in {}", input.display());
        println!("wrote 0 feature files");
        return Ok(());
    }
    let to_file = single && output.extension().is_some_and(|e| e == "ivf");
    if !to_file {
        io_at(output, fs::create_dir_all(output))?;
    }
    for clip in &clips {
        let wav = at(clip, audio::read_wav(clip))?;
        let feats = at(clip, audio::extract(&wav, &cfg.features, cfg.feature_set))?;
        let dest = if to_file {
            output.to_path_buf()
        } else {
            let stem = clip.file_stem().unwrap_or_default();
            output.join(stem).with_extension("ivf")
        };
        let f = io_at(&dest, File::create(&dest))?;
        let mut w = BufWriter::new(f);
        at(&dest, audio::write_feature_file(&mut w, &feats))?;
        io_at(&dest, w.flush())?;
        println!(
            "{} -> {} ({} frames x {} bins, {})",
            clip.display(),
            dest.display(),
            feats.frames(),
            feats.bins(),
            cfg.feature_set
        );
    }
    println!("wrote {} feature files", clips.len());
    Ok(())
}

fn cmd_train_av(data: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let pairs = load_pairs(data, cfg)?;
    io_at(out_dir, fs::create_dir_all(out_dir))?;
    println!(
        "stage A: {} pairs, variant {}, {} steps, seed {}",
        pairs.len(),
        cfg.train.model.transform.variant,
        cfg.train.steps_a,
        cfg.train.seed
    );
    let mut save = |ck: &Checkpoint| -> ivf_core::Result<()> {
        let p = out_dir.join(format!("stage_a_step{:06}.ckpt", ck.step));
        ck.save(&p)?;
        println!("checkpoint {}", p.display());
        Ok(())
    };
    let out = train_stage_a(&pairs, &cfg.train, &mut save)?;
    let final_path = out_dir.join("stage_a.ckpt");
    save_checkpoint(&out.checkpoint, &final_path)?;
    let csv = out_dir.join("loss.csv");
    let f = io_at(&csv, File::create(&csv))?;
    let mut w = BufWriter::new(f);
    at(&csv, write_loss_csv(&mut w, &out.history))?;
    io_at(&csv, w.flush())?;
    let n = out.history.len().min(50);
    if let Some((first, last)) = head_tail_means(&out.history, n, |r| r.recon) {
        println!("reconstruction loss: first {n} steps {first:.4}, last {n} steps {last:.4}");
    }
    if !out.dead_codes.is_empty() {
        println!("{} prototypes unused at the end of training", out.dead_codes.len());
    }
    println!("wrote {} and {}", final_path.display(), csv.display());
    Ok(())
}

fn cmd_train_classifier(
    ck: &Checkpoint,
    ck_path: &Path,
    data: &Path,
    val: Option<&Path>,
    output: &Path,
    shuffle: bool,
    cfg: &RunConfig,
) -> Result<()> {
    let model = at(ck_path, Model::from_checkpoint(ck, &cfg.train.model))?;
    let mut train = load_pairs(data, cfg)?;
    let mut val_pairs = match val {
        Some(p) => load_pairs(p, cfg)?,
        None => Vec::new(),
    };
    if shuffle {
        shuffle_labels(&mut train, cfg.train.seed);
        shuffle_labels(&mut val_pairs, cfg.train.seed.wrapping_add(1));
    }
    println!(
        "stage B: {} training pairs, {} validation pairs, up to {} steps{}",
        train.len(),
        val_pairs.len(),
        cfg.train.steps_b,
        if shuffle { ", labels shuffled" } else { "" }
    );
    let out = train_stage_b(&train, &val_pairs, &model, &cfg.train)?;
    let opt = Optimizers {
        groups: vec![("cls".into(), out.classifier_optimizer.clone())],
    };
    let mut next = out.model.to_checkpoint(ck.step, &cfg.train.echo, Some(&opt));
    for (name, t) in &ck.entries {
        if name.starts_with("opt.") {
            next.push(name.clone(), t.clone());
        }
    }
    save_checkpoint(&next, output)?;
    if out.best_val_accuracy.is_finite() {
        println!(
            "best validation accuracy {:.3} at step {}",
            out.best_val_accuracy, out.best_step
        );
    }
    println!("wrote {}", output.display());
    Ok(())
}
