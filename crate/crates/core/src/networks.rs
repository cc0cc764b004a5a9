//! The two trainable networks.
//!
//! Both are 3D encoder-decoders with skip connections. Stage `i` of the
//! encoder runs at `1/2^i` resolution; the decoder upsamples, concatenates the
//! matching skip and convolves back to that stage's width.
//!
//! * diffusion module: `(S, T, x_t)` plus a sinusoidal embedding of `t` → latent code `c`
//! * deformation module: `(S, c)` → displacement field `φ` (3 channels, voxel units)
//!
//! In direct mode (the field-scaling baseline) the deformation module reads
//! `(S, T)` and there is no diffusion module.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{tensor_to_field, tensor_to_volume, volume_tensor, Graph, Tensor, Var};
use crate::conv::KERNEL;
use crate::error::{DdmError, Result};
use crate::volume::{check_same_shape, DisplacementField, GridShape, LatentCode, Volume};

const DEFORM_SLOPE: f64 = 0.2;
/// Std of the deformation head's initial weights; keeps the untrained field near zero.
const FLOW_INIT_STD: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub diffusion_channels: Vec<usize>,
    pub deform_channels: Vec<usize>,
    pub time_embed_dim: usize,
    pub image_shape: GridShape,
}

impl Default for NetworkConfig {
    /// Published stage widths at the desk-scale grid.
    fn default() -> Self {
        Self {
            diffusion_channels: vec![8, 16, 32, 32],
            deform_channels: vec![16, 32, 32, 32],
            time_embed_dim: 32,
            image_shape: GridShape([32, 32, 8]),
        }
    }
}

impl NetworkConfig {
    /// Published widths on the full 128×128×32 crop.
    pub fn full_scale() -> Self {
        Self {
            image_shape: GridShape([128, 128, 32]),
            ..Self::default()
        }
    }

    /// Small widths for CPU-scale experiments.
    pub fn tiny(shape: [usize; 3]) -> Self {
        Self {
            diffusion_channels: vec![4, 8, 8, 8],
            deform_channels: vec![8, 8, 8, 8],
            time_embed_dim: 8,
            image_shape: GridShape(shape),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, widths) in [
            ("diffusion_channels", &self.diffusion_channels),
            ("deform_channels", &self.deform_channels),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(DdmError::InvalidArgument(format!(
                    "{name} needs at least one stage and positive widths, got {widths:?}"
                )));
            }
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(DdmError::InvalidArgument(format!(
                "time_embed_dim must be even and >= 4, got {}",
                self.time_embed_dim
            )));
        }
        let depth = self.diffusion_channels.len().max(self.deform_channels.len()) - 1;
        let factor = 1usize << depth;
        let shape = self.image_shape.0;
        if shape.iter().any(|&n| n % factor != 0) {
            let padded = shape.map(|n| n.div_ceil(factor) * factor);
            return Err(DdmError::IncompatibleShape {
                shape,
                reason: format!(
                    "{depth} downsampling stages need every axis divisible by {factor}; \
                     pad to {}x{}x{}",
                    padded[0], padded[1], padded[2]
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Diffusion module feeding the deformation module.
    Ddm,
    /// Deformation module on `(S, T)` only.
    Direct,
}

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Layout of one encoder-decoder.
#[derive(Clone, Debug, PartialEq)]
struct UNetLayout {
    in_ch: usize,
    widths: Vec<usize>,
    out_ch: usize,
    time_dim: Option<usize>,
}

impl UNetLayout {
    fn encoder_io(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.widths.len()).map(move |i| {
            let cin = if i == 0 { self.in_ch } else { self.widths[i - 1] };
            (cin, self.widths[i])
        })
    }

    /// Decoder stages from coarse to fine: `(level, in_channels, out_channels)`.
    fn decoder_io(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.widths.len().saturating_sub(1))
            .rev()
            .map(move |i| (i, self.widths[i + 1] + self.widths[i], self.widths[i]))
    }

    fn init(&self, rng: &mut ChaCha8Rng, prefix: &str, zero_head: bool) -> ParamSet {
        let mut p = ParamSet::new();
        if let Some(e) = self.time_dim {
            let (w, b) = linear_init(e, e, rng);
            p.push(format!("{prefix}.time.w"), w);
            p.push(format!("{prefix}.time.b"), b);
        }
        for (i, (cin, cout)) in self.encoder_io().enumerate() {
            let (w, b) = conv_init(cin, cout, rng);
            p.push(format!("{prefix}.enc{i}.w"), w);
            p.push(format!("{prefix}.enc{i}.b"), b);
            if let Some(e) = self.time_dim {
                let (w, b) = linear_init(e, cout, rng);
                p.push(format!("{prefix}.enc{i}.temb.w"), w);
                p.push(format!("{prefix}.enc{i}.temb.b"), b);
            }
        }
        for (i, cin, cout) in self.decoder_io() {
            let (w, b) = conv_init(cin, cout, rng);
            p.push(format!("{prefix}.dec{i}.w"), w);
            p.push(format!("{prefix}.dec{i}.b"), b);
            if let Some(e) = self.time_dim {
                let (w, b) = linear_init(e, cout, rng);
                p.push(format!("{prefix}.dec{i}.temb.w"), w);
                p.push(format!("{prefix}.dec{i}.temb.b"), b);
            }
        }
        let (w, b) = if zero_head {
            let normal = Normal::new(0.0, FLOW_INIT_STD).expect("valid std");
            let w = ArrayD::from_shape_fn(
                IxDyn(&[self.out_ch, self.widths[0], KERNEL, KERNEL, KERNEL]),
                |_| normal.sample(rng),
            );
            (w, ArrayD::zeros(IxDyn(&[self.out_ch])))
        } else {
            conv_init(self.widths[0], self.out_ch, rng)
        };
        p.push(format!("{prefix}.head.w"), w);
        p.push(format!("{prefix}.head.b"), b);
        p
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: Var,
        time: Option<Var>,
        act: Activation,
    ) -> Var {
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter layout matches network");
        let temb = match (self.time_dim, time) {
            (Some(_), Some(t)) => {
                let (w, b) = (next(), next());
                let h = g.linear(t, w, b);
                Some(g.silu(h))
            }
            _ => None,
        };
        let mut skips = Vec::with_capacity(self.widths.len());
        let mut h = input;
        for i in 0..self.widths.len() {
            let (w, b) = (next(), next());
            h = g.conv3d(h, w, b, if i == 0 { 1 } else { 2 });
            if let Some(te) = temb {
                let (w, b) = (next(), next());
                let shift = g.linear(te, w, b);
                h = g.add_channel(h, shift);
            }
            h = act.apply(g, h);
            skips.push(h);
        }
        for i in (0..self.widths.len().saturating_sub(1)).rev() {
            let up = g.upsample2(h);
            let cat = g.concat(&[up, skips[i]]);
            let (w, b) = (next(), next());
            h = g.conv3d(cat, w, b, 1);
            if let Some(te) = temb {
                let (w, b) = (next(), next());
                let shift = g.linear(te, w, b);
                h = g.add_channel(h, shift);
            }
            h = act.apply(g, h);
        }
        let (w, b) = (next(), next());
        g.conv3d(h, w, b, 1)
    }
}

#[derive(Clone, Copy)]
enum Activation {
    Silu,
    LeakyRelu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Silu => g.silu(x),
            Activation::LeakyRelu => g.leaky_relu(x, DEFORM_SLOPE),
        }
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

fn conv_init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let bound = 1.0 / ((cin * KERNEL * KERNEL * KERNEL) as f64).sqrt();
    (
        uniform(&[cout, cin, KERNEL, KERNEL, KERNEL], bound, rng),
        uniform(&[cout], bound, rng),
    )
}

fn linear_init(fan_in: usize, out: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (uniform(&[out, fan_in], bound, rng), uniform(&[out], bound, rng))
}

/// Sinusoidal embedding of a timestep (sin half, then cos half).
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let scale = (10_000f64).ln() / (half.max(2) - 1) as f64;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let arg = t as f64 * (-(k as f64) * scale).exp();
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Both networks' parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: NetworkConfig,
    pub kind: ModelKind,
    pub diffusion: Option<ParamSet>,
    pub deform: ParamSet,
}

fn diffusion_layout(cfg: &NetworkConfig) -> UNetLayout {
    UNetLayout {
        in_ch: 3,
        widths: cfg.diffusion_channels.clone(),
        out_ch: 1,
        time_dim: Some(cfg.time_embed_dim),
    }
}

fn deform_layout(cfg: &NetworkConfig) -> UNetLayout {
    UNetLayout {
        in_ch: 2,
        widths: cfg.deform_channels.clone(),
        out_ch: 3,
        time_dim: None,
    }
}

/// Deterministic construction of both networks from a seed.
pub fn build_networks(cfg: &NetworkConfig, kind: ModelKind, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diffusion = match kind {
        ModelKind::Ddm => Some(diffusion_layout(cfg).init(&mut rng, "diffusion", false)),
        ModelKind::Direct => None,
    };
    let deform = deform_layout(cfg).init(&mut rng, "deform", true);
    Ok(ModelWeights {
        config: cfg.clone(),
        kind,
        diffusion,
        deform,
    })
}

/// Parameters registered as leaves of one graph.
pub struct BoundModel<'w> {
    weights: &'w ModelWeights,
    pub diffusion_vars: Vec<Var>,
    pub deform_vars: Vec<Var>,
}

impl ModelWeights {
    pub fn parameter_count(&self) -> usize {
        self.diffusion.as_ref().map_or(0, ParamSet::count) + self.deform.count()
    }

    pub fn all_finite(&self) -> bool {
        self.diffusion.as_ref().is_none_or(ParamSet::all_finite) && self.deform.all_finite()
    }

    /// Parameter groups in a fixed order: diffusion (if any), then deformation.
    pub fn groups(&self) -> Vec<&ParamSet> {
        self.diffusion.iter().chain(std::iter::once(&self.deform)).collect()
    }

    pub fn groups_mut(&mut self) -> Vec<&mut ParamSet> {
        self.diffusion
            .iter_mut()
            .chain(std::iter::once(&mut self.deform))
            .collect()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundModel<'_> {
        let diffusion_vars = self
            .diffusion
            .iter()
            .flat_map(|p| p.tensors.iter())
            .map(|t| g.param(t.clone()))
            .collect();
        let deform_vars = self.deform.tensors.iter().map(|t| g.param(t.clone())).collect();
        BoundModel {
            weights: self,
            diffusion_vars,
            deform_vars,
        }
    }

    fn check_volume(&self, what: &'static str, shape: [usize; 3]) -> Result<()> {
        check_same_shape(what, self.config.image_shape.0, shape)
    }
}

impl BoundModel<'_> {
    /// `c = G_diffuse(S, T, x_t, t)` as a `[1, X, Y, Z]` node.
    pub fn diffusion(&self, g: &mut Graph, source: Var, target: Var, noisy: Var, t: usize) -> Result<Var> {
        if self.weights.kind != ModelKind::Ddm {
            return Err(DdmError::InvalidArgument(
                "direct-mode weights have no diffusion module".into(),
            ));
        }
        let layout = diffusion_layout(&self.weights.config);
        let input = g.concat(&[source, target, noisy]);
        let temb = g.input(timestep_embedding(t, self.weights.config.time_embed_dim).into_dyn());
        Ok(layout.forward(g, &self.diffusion_vars, input, Some(temb), Activation::Silu))
    }

    /// `φ = G_deform(S, second)` as a `[3, X, Y, Z]` node; `second` is the code
    /// `c` in DDM mode and the target in direct mode.
    pub fn deformation(&self, g: &mut Graph, source: Var, second: Var) -> Var {
        let layout = deform_layout(&self.weights.config);
        let input = g.concat(&[source, second]);
        layout.forward(g, &self.deform_vars, input, None, Activation::LeakyRelu)
    }

    pub fn all_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.diffusion_vars.iter().chain(self.deform_vars.iter()).copied()
    }
}

/// Inference-only diffusion pass.
pub fn diffusion_forward(
    w: &ModelWeights,
    source: &Volume,
    target: &Volume,
    noisy: &Volume,
    t: usize,
) -> Result<LatentCode> {
    for (what, v) in [
        ("diffusion_forward: source", source),
        ("diffusion_forward: target", target),
        ("diffusion_forward: x_t", noisy),
    ] {
        w.check_volume(what, v.shape())?;
    }
    let mut g = Graph::new();
    let bound = w.bind(&mut g);
    let s = g.input(volume_tensor(&source.data));
    let tt = g.input(volume_tensor(&target.data));
    let x = g.input(volume_tensor(&noisy.data));
    let c = bound.diffusion(&mut g, s, tt, x, t)?;
    LatentCode::new(tensor_to_volume(g.value(c)))
}

/// Inference-only deformation pass on `(S, c)`.
pub fn deformation_forward(w: &ModelWeights, source: &Volume, code: &LatentCode) -> Result<DisplacementField> {
    w.check_volume("deformation_forward: source", source.shape())?;
    w.check_volume("deformation_forward: code", code.shape())?;
    if w.kind != ModelKind::Ddm {
        return Err(DdmError::InvalidArgument(
            "deformation_forward expects DDM weights; use direct_forward".into(),
        ));
    }
    Ok(deform_pass(w, &source.data, &code.data))
}

/// Direct-mode registration pass on `(S, T)`.
pub fn direct_forward(w: &ModelWeights, source: &Volume, target: &Volume) -> Result<DisplacementField> {
    w.check_volume("direct_forward: source", source.shape())?;
    w.check_volume("direct_forward: target", target.shape())?;
    if w.kind != ModelKind::Direct {
        return Err(DdmError::InvalidArgument(
            "direct_forward expects direct-mode weights".into(),
        ));
    }
    Ok(deform_pass(w, &source.data, &target.data))
}

fn deform_pass(w: &ModelWeights, source: &ndarray::Array3<f64>, second: &ndarray::Array3<f64>) -> DisplacementField {
    let mut g = Graph::new();
    let bound = w.bind(&mut g);
    let s = g.input(volume_tensor(source));
    let c = g.input(volume_tensor(second));
    let phi = bound.deformation(&mut g, s, c);
    tensor_to_field(g.value(phi))
}
