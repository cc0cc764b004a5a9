//! Inference: estimate one latent code per pair, then generate frames along the
//! trajectory by scaling it.

use std::cell::Cell;

use crate::error::{DdmError, Result};
use crate::field_ops::{check_gamma, scale_field, warp_trilinear};
use crate::networks::{deformation_forward, diffusion_forward, direct_forward, ModelKind, ModelWeights};
use crate::volume::{check_same_shape, DisplacementField, LatentCode, Volume};

/// One generated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub gamma: f64,
    pub field: DisplacementField,
    pub volume: Volume,
}

/// Uniform grid `k / (n - 1)` for `k = 0..n`.
pub fn gamma_grid(n_frames: usize) -> Result<Vec<f64>> {
    if n_frames < 2 {
        return Err(DdmError::InvalidArgument(format!(
            "a sequence needs at least 2 frames, got {n_frames}"
        )));
    }
    let last = (n_frames - 1) as f64;
    Ok((0..n_frames).map(|k| k as f64 / last).collect())
}

/// Wraps trained weights and counts network invocations.
pub struct Generator<'w> {
    weights: &'w ModelWeights,
    latent_calls: Cell<usize>,
    frame_calls: Cell<usize>,
}

impl<'w> Generator<'w> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        Self {
            weights,
            latent_calls: Cell::new(0),
            frame_calls: Cell::new(0),
        }
    }

    pub fn latent_calls(&self) -> usize {
        self.latent_calls.get()
    }

    pub fn frame_calls(&self) -> usize {
        self.frame_calls.get()
    }

    /// `c = G_diffuse(S, T, x_0 = T, t = 0)`: the clean target, no noise.
    pub fn estimate_latent(&self, source: &Volume, target: &Volume) -> Result<LatentCode> {
        check_same_shape("estimate_latent: target vs source", source.shape(), target.shape())?;
        self.latent_calls.set(self.latent_calls.get() + 1);
        diffusion_forward(self.weights, source, target, target, 0)
    }

    pub fn generate_frame(&self, source: &Volume, code: &LatentCode, gamma: f64) -> Result<Frame> {
        check_gamma(gamma)?;
        self.frame_calls.set(self.frame_calls.get() + 1);
        let field = deformation_forward(self.weights, source, &code.scaled(gamma))?;
        let volume = warp_trilinear(source, &field)?;
        Ok(Frame { gamma, field, volume })
    }

    pub fn generate_sequence(&self, source: &Volume, target: &Volume, n_frames: usize) -> Result<Vec<Frame>> {
        let gammas = gamma_grid(n_frames)?;
        let code = self.estimate_latent(source, target)?;
        gammas
            .into_iter()
            .map(|g| self.generate_frame(source, &code, g))
            .collect()
    }
}

pub fn estimate_latent(w: &ModelWeights, source: &Volume, target: &Volume) -> Result<LatentCode> {
    Generator::new(w).estimate_latent(source, target)
}

pub fn generate_frame(w: &ModelWeights, source: &Volume, code: &LatentCode, gamma: f64) -> Result<Frame> {
    Generator::new(w).generate_frame(source, code, gamma)
}

pub fn generate_sequence(w: &ModelWeights, source: &Volume, target: &Volume, n_frames: usize) -> Result<Vec<Frame>> {
    Generator::new(w).generate_sequence(source, target, n_frames)
}

/// Direct-mode baseline: one registration field, frames from `γ·φ`.
pub fn baseline_scaled_sequence(
    w_direct: &ModelWeights,
    source: &Volume,
    target: &Volume,
    n_frames: usize,
) -> Result<Vec<Frame>> {
    if w_direct.kind != ModelKind::Direct {
        return Err(DdmError::InvalidArgument(
            "the scaled-field baseline needs direct-mode weights".into(),
        ));
    }
    let gammas = gamma_grid(n_frames)?;
    let phi = direct_forward(w_direct, source, target)?;
    gammas
        .into_iter()
        .map(|g| {
            let field = scale_field(&phi, g)?;
            let volume = warp_trilinear(source, &field)?;
            Ok(Frame { gamma: g, field, volume })
        })
        .collect()
}

/// Largest deviation of `φ_γ / γ` from the first nonzero-γ frame's normalized field.
pub fn normalized_field_spread(frames: &[Frame]) -> f64 {
    let normalized: Vec<_> = frames
        .iter()
        .filter(|f| f.gamma > 0.0)
        .map(|f| f.field.data.mapv(|v| v / f.gamma))
        .collect();
    let Some(first) = normalized.first() else { return 0.0 };
    normalized
        .iter()
        .flat_map(|n| n.iter().zip(first.iter()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}
