//! Command-line front end: synthesis, training, generation, evaluation and
//! lambda sweeps over the `ddm-core` library.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod montage;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ddm_core::data::{make_synthetic_set, save_field, save_volume};
use ddm_core::generator::{baseline_scaled_sequence, generate_sequence, Frame};
use ddm_core::losses::local_ncc;
use ddm_core::networks::{ModelKind, ModelWeights};
use ddm_core::trainer::{fit, load_weights, Checkpoint, FitOutputs, Trainer, LAST_CHECKPOINT};
use ddm_core::GridShape;
use serde::{Deserialize, Serialize};

use config::{Device, Overrides, RunConfig};
use dataset::Split;
use eval::{evaluate_subject, format_report, summarize, Report, SubjectMetrics};

/// Default output directory of `train`; `--ckpt last` points into it.
pub const DEFAULT_TRAIN_DIR: &str = "runs/train";

#[derive(Parser, Debug)]
#[command(name = "ddm", version, about = "Diffusion deformable model for temporal volume generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Image grid, e.g. 32x32x8.
    #[arg(long)]
    pub shape: Option<GridShape>,
    /// Compute device (cpu only).
    #[arg(long)]
    pub device: Option<Device>,
    /// ACDC-layout data directory; synthetic subjects are used when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic subjects (NIfTI volumes, labels, 4D sequence, true field).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Frames per synthetic sequence.
        #[arg(long)]
        frames: Option<usize>,
        /// Number of subjects.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write the epoch log and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate a frame sequence for one subject.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file, run directory, or `last`.
        #[arg(long)]
        ckpt: String,
        /// Number of frames (default: the subject's sequence length).
        #[arg(long)]
        frames: Option<usize>,
        /// Subject id (default: the first subject).
        #[arg(long)]
        subject: Option<String>,
    },
    /// Score generated sequences against real frames and labels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: String,
    },
    /// Train and evaluate one model per lambda on shared data.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lambda values (default from the config).
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        shape: c.shape,
        data: c.data.clone(),
        device: c.device,
        frames: None,
    }
}

/// `last` → the default training run; a directory → its latest checkpoint.
pub fn resolve_checkpoint(arg: &str) -> PathBuf {
    let p = if arg == "last" {
        PathBuf::from(DEFAULT_TRAIN_DIR)
    } else {
        PathBuf::from(arg)
    };
    if p.is_dir() {
        let direct = p.join(LAST_CHECKPOINT);
        if direct.is_file() {
            return direct;
        }
        return p.join("checkpoints").join(LAST_CHECKPOINT);
    }
    p
}

fn jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common, frames, count } => {
            let out = common.out.clone().context("synth needs --out")?;
            let mut o = overrides(&common);
            o.frames = frames;
            let mut cfg = RunConfig::resolve(common.config.as_deref(), &o)?;
            if let Some(n) = count {
                cfg.synthetic.count = n;
            }
            let n = cmd_synth(&cfg, &out)?;
            println!("wrote {n} synthetic subjects to {}", out.display());
        }
        Command::Train { common, ckpt, epochs } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), &overrides(&common))?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let out = common.out.clone().unwrap_or_else(|| DEFAULT_TRAIN_DIR.into());
            let resume = ckpt.as_deref().map(resolve_checkpoint);
            let last = cmd_train(&mut cfg, &out, resume.as_deref())?;
            println!("checkpoint {}", last.display());
        }
        Command::Generate {
            common,
            ckpt,
            frames,
            subject,
        } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), &overrides(&common))?;
            let out = common.out.clone().unwrap_or_else(|| "runs/generate".into());
            let rows = cmd_generate(cfg, &resolve_checkpoint(&ckpt), &out, frames, subject.as_deref())?;
            for r in &rows {
                println!("frame {:2}  gamma {:.3}  ncc_to_target {:.4}", r.index, r.gamma, r.ncc_to_target);
            }
        }
        Command::Evaluate { common, ckpt } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), &overrides(&common))?;
            let out = common.out.clone().unwrap_or_else(|| "runs/evaluate".into());
            let (_, report) = cmd_evaluate(cfg, &resolve_checkpoint(&ckpt), &out)?;
            println!("{}", format_report(&report));
        }
        Command::SweepLambda { common, lambdas, epochs } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), &overrides(&common))?;
            if !lambdas.is_empty() {
                cfg.sweep.lambdas = lambdas;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let out = common.out.clone().unwrap_or_else(|| "runs/sweep".into());
            let rows = cmd_sweep(&cfg, &out)?;
            println!("{}", format_sweep(&rows));
        }
    }
    Ok(())
}

/// Writes `cfg.synthetic.count` subjects under `out`; returns the count.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<usize> {
    cfg.save(out)?;
    let set = make_synthetic_set(cfg.synthetic.seed, cfg.synthetic.count, &cfg.synthetic.options)?;
    for s in &set {
        dataset::write_subject(out, s)?;
    }
    Ok(set.len())
}

/// Trains on the configured data; returns the path of the final checkpoint.
pub fn cmd_train(cfg: &mut RunConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<PathBuf> {
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            cfg.network = ck.network.clone();
            let mut t = ck.trainer()?;
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => Trainer::new(&cfg.network, cfg.train.clone())?,
    };
    cfg.save(out)?;
    let data = dataset::load_split(cfg, Split::Train)?;
    let ckpt_dir = out.join("checkpoints");
    let mut log = BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("train_log.jsonl"))?,
    );
    fit(
        &mut trainer,
        &data,
        FitOutputs {
            log: Some(&mut log),
            checkpoint_dir: Some(ckpt_dir.clone()),
        },
    )?;
    let last = ckpt_dir.join(LAST_CHECKPOINT);
    if !last.is_file() {
        // resumed run that was already complete
        std::fs::create_dir_all(&ckpt_dir)?;
        Checkpoint::capture(&trainer).save(&last)?;
    }
    Ok(last)
}

fn weights_for(cfg: &mut RunConfig, ckpt: &Path) -> anyhow::Result<ModelWeights> {
    let w = load_weights(ckpt, None).with_context(|| format!("loading {}", ckpt.display()))?;
    let shape = w.config.image_shape;
    cfg.network = w.config.clone();
    cfg.data.preprocess.target_shape = shape.0;
    cfg.synthetic.options.shape = shape.0;
    Ok(w)
}

fn sequence(w: &ModelWeights, s: &ddm_core::Volume, t: &ddm_core::Volume, n: usize) -> ddm_core::Result<Vec<Frame>> {
    match w.kind {
        ModelKind::Ddm => generate_sequence(w, s, t, n),
        ModelKind::Direct => baseline_scaled_sequence(w, s, t, n),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub gamma: f64,
    pub ncc_to_target: f64,
    pub ncc_to_source: f64,
    pub mean_displacement: f64,
}

pub fn cmd_generate(
    mut cfg: RunConfig,
    ckpt: &Path,
    out: &Path,
    frames: Option<usize>,
    subject: Option<&str>,
) -> anyhow::Result<Vec<FrameRecord>> {
    let w = weights_for(&mut cfg, ckpt)?;
    cfg.save(out)?;
    let records = dataset::load_all(&cfg)?;
    let rec = match subject {
        Some(id) => records
            .iter()
            .find(|r| r.id == id)
            .with_context(|| format!("no subject {id}"))?,
        None => records.first().context("no subjects")?,
    };
    let n = frames.unwrap_or(rec.n_frames);
    let seq = sequence(&w, &rec.ed, &rec.es, n)?;
    let window = cfg.train.ncc_window;
    let dir = out.join("frames");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::with_capacity(n);
    for (k, f) in seq.iter().enumerate() {
        save_volume(dir.join(format!("frame_{k:02}.nii.gz")), &f.volume)?;
        save_field(dir.join(format!("field_{k:02}.nii.gz")), &f.field, f.volume.spacing)?;
        rows.push(FrameRecord {
            index: k,
            gamma: f.gamma,
            ncc_to_target: local_ncc(&f.volume, &rec.es, window)?,
            ncc_to_source: local_ncc(&f.volume, &rec.ed, window)?,
            mean_displacement: f.field.mean_magnitude(),
        });
    }
    jsonl(&out.join("frames.jsonl"), &rows)?;
    let vols: Vec<_> = seq.iter().map(|f| &f.volume).collect();
    montage::save_montage(&out.join("montage.png"), &vols)?;
    Ok(rows)
}

pub fn cmd_evaluate(mut cfg: RunConfig, ckpt: &Path, out: &Path) -> anyhow::Result<(Vec<SubjectMetrics>, Report)> {
    let w = weights_for(&mut cfg, ckpt)?;
    cfg.save(out)?;
    let records = dataset::load_split(&cfg, Split::Test)?;
    let rows = evaluate_records(&w, &records)?;
    let report = summarize(&rows).context("no subjects to evaluate")?;
    jsonl(&out.join("metrics.jsonl"), &rows)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok((rows, report))
}

pub fn evaluate_records(w: &ModelWeights, records: &[ddm_core::data::SubjectRecord]) -> anyhow::Result<Vec<SubjectMetrics>> {
    records
        .iter()
        .map(|r| evaluate_subject(w, r).with_context(|| format!("evaluating {}", r.id)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    #[serde(rename = "PSNR")]
    pub psnr: Option<f64>,
    #[serde(rename = "NMSE")]
    pub nmse: Option<f64>,
    #[serde(rename = "Dice")]
    pub dice: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

fn sweep_one(cfg: &RunConfig, lambda: f64, dir: &Path) -> anyhow::Result<SweepRow> {
    let mut c = cfg.clone();
    c.train.lambda = lambda;
    c.validate()?;
    c.save(dir)?;
    let train = dataset::load_split(&c, Split::Train)?;
    let test = dataset::load_split(&c, Split::Test)?;
    let mut trainer = Trainer::new(&c.network, c.train.clone())?;
    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let epochs = fit(
        &mut trainer,
        &train,
        FitOutputs {
            log: Some(&mut log),
            checkpoint_dir: Some(dir.join("checkpoints")),
        },
    )?;
    let rows = evaluate_records(&trainer.weights, &test)?;
    jsonl(&dir.join("metrics.jsonl"), &rows)?;
    let rep = summarize(&rows).context("no subjects to evaluate")?;
    Ok(SweepRow {
        lambda,
        psnr: Some(rep.metrics.psnr.mean),
        nmse: Some(rep.metrics.nmse.mean),
        dice: rep.metrics.dice.map(|d| d.mean),
        final_loss: epochs.last().map(|e| e.total),
        error: None,
    })
}

/// One row per lambda, ascending. A failing lambda yields a row with `error`
/// set instead of aborting the sweep.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<SweepRow>> {
    let mut lambdas = cfg.sweep.lambdas.clone();
    if lambdas.iter().any(|l| !l.is_finite()) {
        bail!("lambda values must be finite");
    }
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    if lambdas.len() < 2 {
        bail!("a sweep needs at least two distinct lambda values");
    }
    cfg.save(out)?;
    let mut rows = Vec::new();
    for &lambda in &lambdas {
        let dir = out.join(format!("lambda_{lambda}"));
        let row = sweep_one(cfg, lambda, &dir).unwrap_or_else(|e| {
            log::error!("lambda {lambda}: {e:#}");
            SweepRow {
                lambda,
                psnr: None,
                nmse: None,
                dice: None,
                final_loss: None,
                error: Some(format!("{e:#}")),
            }
        });
        rows.push(row);
    }
    jsonl(&out.join("sweep.jsonl"), &rows)?;
    Ok(rows)
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let mut s = format!("{:>8} {:>10} {:>10} {:>8}", "lambda", "PSNR", "NMSE", "Dice");
    for r in rows {
        s.push_str(&format!(
            "\n{:>8} {:>10} {:>10} {:>8}{}",
            r.lambda,
            f(r.psnr),
            f(r.nmse),
            f(r.dice),
            r.error.as_ref().map(|e| format!("  error: {e}")).unwrap_or_default()
        ));
    }
    s
}
