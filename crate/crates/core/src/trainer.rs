//! End-to-end unsupervised training of both networks, epoch logging and
//! checkpoint persistence.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array3, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{volume_tensor, Graph, Tensor};
use crate::data::SubjectRecord;
use crate::error::{DdmError, Result};
use crate::losses::{LossBreakdown, LossWeights, DEFAULT_NCC_WINDOW};
use crate::networks::{build_networks, ModelKind, ModelWeights, NetworkConfig, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{sample_timestep, NoiseSchedule};
use crate::volume::{check_same_shape, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lambda_r: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of forward diffusion steps `u`.
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub ncc_window: usize,
    pub seed: u64,
    /// Epoch interval between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip. Off unless set.
    pub grad_clip: Option<f64>,
    pub kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            lambda_r: 1.0,
            lr: 2e-4,
            epochs: 800,
            batch_size: 1,
            diffusion_steps: 2000,
            beta_min: 1e-6,
            beta_max: 1e-2,
            ncc_window: DEFAULT_NCC_WINDOW,
            seed: 0,
            checkpoint_every: 50,
            grad_clip: None,
            kind: ModelKind::Ddm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DdmError::InvalidArgument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return bad(format!("lambda_r must be finite and >= 0, got {}", self.lambda_r));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.ncc_window == 0 || self.ncc_window % 2 == 0 {
            return bad(format!("ncc_window must be odd, got {}", self.ncc_window));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        NoiseSchedule::linear(self.diffusion_steps, self.beta_min, self.beta_max).map(|_| ())
    }

    /// Weights actually applied to the loss terms. Direct mode has no diffusion
    /// term, so the deformation terms are used unscaled.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: match self.kind {
                ModelKind::Ddm => self.lambda,
                ModelKind::Direct => 1.0,
            },
            lambda_r: self.lambda_r,
            ncc_window: self.ncc_window,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_min, self.beta_max)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One pair's loss for a fixed `(t, ε)`, with gradients in `groups()` order
/// when requested.
pub fn loss_and_grads(
    w: &ModelWeights,
    source: &Volume,
    target: &Volume,
    step: usize,
    noise: &Array3<f64>,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
    let shape = w.config.image_shape.0;
    check_same_shape("training source", shape, source.shape())?;
    check_same_shape("training target", shape, target.shape())?;
    check_same_shape("noise draw", shape, crate::volume::dims(noise))?;

    let mut g = Graph::new();
    let bound = w.bind(&mut g);
    let s = g.input(volume_tensor(&source.data));
    let t = g.input(volume_tensor(&target.data));

    let (diffuse, second) = match w.kind {
        ModelKind::Ddm => {
            let noisy = schedule.perturb(target, step, noise)?;
            let x = g.input(volume_tensor(&noisy.data));
            let eps = g.input(volume_tensor(noise));
            let c = bound.diffusion(&mut g, s, t, x, step)?;
            (Some(g.mse(c, eps)), c)
        }
        ModelKind::Direct => (None, t),
    };
    let field = bound.deformation(&mut g, s, second);
    let warped = g.warp(s, field);
    let ncc = g.ncc(warped, t, weights.ncc_window);
    let smooth = g.smoothness(field);

    let neg_ncc = g.scale(ncc, -1.0);
    let reg = g.scale(smooth, weights.lambda_r);
    let deform = g.add(neg_ncc, reg);
    let deform = g.scale(deform, weights.lambda);
    let total = match diffuse {
        Some(d) => g.add(d, deform),
        None => deform,
    };

    let breakdown = LossBreakdown::compose(
        diffuse.map_or(0.0, |d| g.scalar_value(d)),
        g.scalar_value(neg_ncc),
        g.scalar_value(smooth),
        weights,
    );
    if let Some(component) = breakdown.non_finite_component() {
        return Err(DdmError::NonFinite(format!("loss component {component}")));
    }
    if !want_grads {
        return Ok((breakdown, None));
    }
    let mut grads = g.backward(total);
    let params: Vec<_> = bound.all_vars().collect();
    let tensors = w.groups().into_iter().flat_map(|p| p.tensors.iter());
    let out = params
        .into_iter()
        .zip(tensors)
        .map(|(v, p)| {
            grads
                .take(v)
                .map(|t| t.as_standard_layout().into_owned())
                .unwrap_or_else(|| Tensor::zeros(p.raw_dim()))
        })
        .collect();
    Ok((breakdown, Some(out)))
}

/// Draws `ε ~ N(0, I)` with the given shape.
pub fn draw_noise<R: rand::Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Per-epoch mean losses, one JSON object per line in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub diffuse: f64,
    pub deform_similarity: f64,
    pub deform_smooth: f64,
    pub total: f64,
    pub wall_time: f64,
}

/// Mutable training state: weights, optimizer moments and the RNG stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub weights: ModelWeights,
    pub adam: Adam,
    pub epochs_done: usize,
    schedule: NoiseSchedule,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh networks initialized from `config.seed`.
    pub fn new(network: &NetworkConfig, config: TrainConfig) -> Result<Self> {
        let weights = build_networks(network, config.kind, config.seed)?;
        Self::with_weights(weights, config)
    }

    pub fn with_weights(weights: ModelWeights, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if weights.kind != config.kind {
            return Err(DdmError::InvalidArgument(format!(
                "weights are {:?} but the config trains {:?}",
                weights.kind, config.kind
            )));
        }
        let schedule = config.schedule()?;
        let adam = Adam::new(config.adam(), &weights);
        // a separate stream from the one used for initialization
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(Self {
            config,
            weights,
            adam,
            epochs_done: 0,
            schedule,
            rng,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// One update on a single `(S, T)` pair; returns the pre-update losses.
    pub fn train_step(&mut self, source: &Volume, target: &Volume) -> Result<LossBreakdown> {
        self.train_batch(&[(source, target)])
    }

    /// One update on the mean loss of a batch of pairs, each with its own `(t, ε)`.
    pub fn train_batch(&mut self, pairs: &[(&Volume, &Volume)]) -> Result<LossBreakdown> {
        if pairs.is_empty() {
            return Err(DdmError::InvalidArgument("empty batch".into()));
        }
        let weights = self.config.loss_weights();
        let shape = self.weights.config.image_shape.0;
        let mut mean = LossBreakdown::default();
        let mut acc: Option<Vec<Tensor>> = None;
        for (s, t) in pairs {
            let step = sample_timestep(self.schedule.steps(), &mut self.rng);
            let noise = draw_noise(shape, &mut self.rng);
            let (loss, grads) =
                loss_and_grads(&self.weights, s, t, step, &noise, &self.schedule, &weights, true)?;
            let grads = grads.expect("requested");
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (x, g) in a.iter_mut().zip(&grads) {
                        *x += g;
                    }
                    a
                }
            });
            add_breakdown(&mut mean, &loss, 1.0);
        }
        let k = pairs.len() as f64;
        let mut grads = acc.expect("non-empty batch");
        let mut out = LossBreakdown::default();
        add_breakdown(&mut out, &mean, 1.0 / k);
        if k > 1.0 {
            grads.iter_mut().for_each(|g| *g /= k);
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(DdmError::NonFinite("parameter gradient".into()));
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                grads.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        self.adam.update(&mut self.weights, &grads);
        if !self.weights.all_finite() {
            return Err(DdmError::NonFinite("parameters after update".into()));
        }
        Ok(out)
    }

    /// One pass over `dataset` in shuffled order; returns the mean losses.
    pub fn run_epoch(&mut self, dataset: &[SubjectRecord]) -> Result<EpochRecord> {
        if dataset.is_empty() {
            return Err(DdmError::InvalidArgument("cannot train on an empty dataset".into()));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(self.config.batch_size) {
            let pairs: Vec<_> = chunk.iter().map(|&i| (&dataset[i].ed, &dataset[i].es)).collect();
            let loss = self.train_batch(&pairs)?;
            add_breakdown(&mut sum, &loss, chunk.len() as f64);
        }
        let n = dataset.len() as f64;
        self.epochs_done += 1;
        Ok(EpochRecord {
            epoch: self.epochs_done,
            diffuse: sum.diffuse / n,
            deform_similarity: sum.deform_similarity / n,
            deform_smooth: sum.deform_smooth / n,
            total: sum.total / n,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

fn add_breakdown(acc: &mut LossBreakdown, x: &LossBreakdown, k: f64) {
    acc.diffuse += k * x.diffuse;
    acc.deform_similarity += k * x.deform_similarity;
    acc.deform_smooth += k * x.deform_smooth;
    acc.total += k * x.total;
}

/// Where `fit` writes its log and checkpoints. Both are optional.
#[derive(Default)]
pub struct FitOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// File name of the most recent checkpoint inside a checkpoint directory.
pub const LAST_CHECKPOINT: &str = "last.ckpt.json";

/// Trains for the remaining `config.epochs` epochs over ED→ES pairs.
///
/// On a failed epoch the error is returned and the last checkpoint on disk is
/// left untouched.
pub fn fit(trainer: &mut Trainer, dataset: &[SubjectRecord], mut out: FitOutputs<'_>) -> Result<Vec<EpochRecord>> {
    if dataset.is_empty() {
        return Err(DdmError::InvalidArgument("cannot train on an empty dataset".into()));
    }
    for r in dataset {
        r.validate()?;
    }
    let mut records = Vec::new();
    while trainer.epochs_done < trainer.config.epochs {
        let rec = trainer.run_epoch(dataset).map_err(|e| match e {
            DdmError::NonFinite(what) => {
                DdmError::NonFinite(format!("{what} in epoch {}", trainer.epochs_done + 1))
            }
            other => other,
        })?;
        log::info!("epoch {} total {:.5}", rec.epoch, rec.total);
        if let Some(w) = out.log.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w)?;
            w.flush()?;
        }
        records.push(rec);
        if let Some(dir) = &out.checkpoint_dir {
            let every = trainer.config.checkpoint_every;
            let last = trainer.epochs_done == trainer.config.epochs;
            if last || (every > 0 && trainer.epochs_done % every == 0) {
                std::fs::create_dir_all(dir)?;
                let ckpt = Checkpoint::capture(trainer);
                if !last {
                    ckpt.save(dir.join(format!("epoch{:05}.ckpt.json", trainer.epochs_done)))?;
                }
                ckpt.save(dir.join(LAST_CHECKPOINT))?;
            }
        }
    }
    Ok(records)
}

pub const CHECKPOINT_FORMAT: &str = "ddm-checkpoint";
/// Major version; readers accept any file with the same major version.
pub const CHECKPOINT_VERSION: &str = "1.0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Blob {
    name: String,
    shape: Vec<usize>,
    /// Little-endian f64 bytes, base64.
    data: String,
}

fn encode(name: &str, t: &Tensor) -> Blob {
    let bytes: Vec<u8> = t.iter().flat_map(|v| v.to_le_bytes()).collect();
    Blob {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: B64.encode(bytes),
    }
}

fn decode(b: &Blob) -> Result<Tensor> {
    let bytes = B64
        .decode(&b.data)
        .map_err(|e| DdmError::Checkpoint(format!("parameter {}: {e}", b.name)))?;
    let n: usize = b.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(DdmError::Checkpoint(format!(
            "parameter {}: {} bytes for shape {:?}",
            b.name,
            bytes.len(),
            b.shape
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_shape_vec(IxDyn(&b.shape), values)
        .map_err(|e| DdmError::Checkpoint(format!("parameter {}: {e}", b.name)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamState {
    step: u64,
    config: AdamConfig,
    first: Vec<Blob>,
    second: Vec<Blob>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

/// Versioned on-disk training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub epochs_done: usize,
    diffusion: Option<Vec<Blob>>,
    deform: Vec<Blob>,
    adam: Option<AdamState>,
    rng: Option<RngState>,
}

fn major(v: &str) -> &str {
    v.split('.').next().unwrap_or(v)
}

impl Checkpoint {
    /// Weights only; resuming from it starts fresh optimizer moments.
    pub fn from_weights(weights: &ModelWeights, train: &TrainConfig) -> Self {
        let blobs = |p: &ParamSet| p.names.iter().zip(&p.tensors).map(|(n, t)| encode(n, t)).collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION.into(),
            network: weights.config.clone(),
            train: TrainConfig {
                kind: weights.kind,
                ..train.clone()
            },
            epochs_done: 0,
            diffusion: weights.diffusion.as_ref().map(blobs),
            deform: blobs(&weights.deform),
            adam: None,
            rng: None,
        }
    }

    pub fn capture(trainer: &Trainer) -> Self {
        let mut ck = Self::from_weights(&trainer.weights, &trainer.config);
        ck.epochs_done = trainer.epochs_done;
        let names: Vec<&String> = trainer.weights.groups().into_iter().flat_map(|p| p.names.iter()).collect();
        let moments = |m: &[Tensor]| names.iter().zip(m).map(|(n, t)| encode(n, t)).collect();
        ck.adam = Some(AdamState {
            step: trainer.adam.step,
            config: trainer.adam.config,
            first: moments(&trainer.adam.first),
            second: moments(&trainer.adam.second),
        });
        ck.rng = Some(RngState {
            seed: B64.encode(trainer.rng.get_seed()),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos().to_string(),
        });
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| DdmError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        // check the envelope before the body so version errors stay readable
        let head: serde_json::Value = serde_json::from_slice(&bytes)?;
        let format = head.get("format").and_then(|v| v.as_str()).unwrap_or("");
        let version = head.get("version").and_then(|v| v.as_str()).unwrap_or("none");
        if format != CHECKPOINT_FORMAT {
            return Err(DdmError::Checkpoint(format!(
                "{} is not a {CHECKPOINT_FORMAT} file (format {format:?})",
                path.display()
            )));
        }
        if major(version) != major(CHECKPOINT_VERSION) {
            return Err(DdmError::Checkpoint(format!(
                "checkpoint version {version} is incompatible with reader version {CHECKPOINT_VERSION}"
            )));
        }
        let ck: Checkpoint = serde_json::from_value(head)?;
        ck.network.validate()?;
        Ok(ck)
    }

    /// Rejects a checkpoint whose network configuration differs from `expected`.
    pub fn check_network(&self, expected: &NetworkConfig) -> Result<()> {
        if &self.network != expected {
            return Err(DdmError::Checkpoint(format!(
                "network config mismatch: checkpoint has {}, expected {}",
                serde_json::to_string(&self.network)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<ModelWeights> {
        let template = build_networks(&self.network, self.train.kind, 0)?;
        let fill = |tpl: &ParamSet, blobs: &[Blob]| -> Result<ParamSet> {
            if tpl.names.len() != blobs.len() {
                return Err(DdmError::Checkpoint(format!(
                    "expected {} tensors, found {}",
                    tpl.names.len(),
                    blobs.len()
                )));
            }
            let mut tensors = Vec::with_capacity(blobs.len());
            for ((name, t), b) in tpl.names.iter().zip(&tpl.tensors).zip(blobs) {
                if &b.name != name || b.shape != t.shape() {
                    return Err(DdmError::Checkpoint(format!(
                        "parameter {name} {:?} does not match stored {} {:?}",
                        t.shape(),
                        b.name,
                        b.shape
                    )));
                }
                tensors.push(decode(b)?);
            }
            Ok(ParamSet {
                names: tpl.names.clone(),
                tensors,
            })
        };
        let diffusion = match (&template.diffusion, &self.diffusion) {
            (Some(tpl), Some(blobs)) => Some(fill(tpl, blobs)?),
            (None, None) => None,
            _ => {
                return Err(DdmError::Checkpoint(
                    "diffusion parameters do not match the model kind".into(),
                ))
            }
        };
        let weights = ModelWeights {
            config: self.network.clone(),
            kind: self.train.kind,
            diffusion,
            deform: fill(&template.deform, &self.deform)?,
        };
        if !weights.all_finite() {
            return Err(DdmError::Checkpoint("non-finite parameters".into()));
        }
        Ok(weights)
    }

    /// Restores full training state (weights, optimizer, RNG position).
    pub fn trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::with_weights(self.weights()?, self.train.clone())?;
        t.epochs_done = self.epochs_done;
        if let Some(a) = &self.adam {
            let first = a.first.iter().map(decode).collect::<Result<Vec<_>>>()?;
            let second = a.second.iter().map(decode).collect::<Result<Vec<_>>>()?;
            if first.len() != t.adam.first.len() || second.len() != t.adam.second.len() {
                return Err(DdmError::Checkpoint("optimizer state does not match parameters".into()));
            }
            t.adam = Adam {
                config: a.config,
                step: a.step,
                first,
                second,
            };
        }
        if let Some(r) = &self.rng {
            let seed: [u8; 32] = B64
                .decode(&r.seed)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| DdmError::Checkpoint("bad rng seed".into()))?;
            let pos: u128 = r
                .word_pos
                .parse()
                .map_err(|_| DdmError::Checkpoint("bad rng position".into()))?;
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(r.stream);
            rng.set_word_pos(pos);
            t.rng = rng;
        }
        Ok(t)
    }
}

/// Loads weights from a checkpoint file, optionally insisting on a network config.
pub fn load_weights(path: impl AsRef<Path>, expected: Option<&NetworkConfig>) -> Result<ModelWeights> {
    let ck = Checkpoint::load(path)?;
    if let Some(cfg) = expected {
        ck.check_network(cfg)?;
    }
    ck.weights()
}
