//! Forward diffusion: linear noise schedule, cumulative products, target perturbation.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};
use crate::volume::{check_same_shape, Volume};

/// Immutable β schedule with precomputed cumulative products ᾱ.
///
/// Steps are 1-indexed. Index 0 means "no noise" and has ᾱ₀ = 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly interpolated from `beta_min` at t=1 to `beta_max` at t=`steps`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DdmError::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(DdmError::InvalidArgument(format!(
                "beta range must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            let denom = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * (i as f64 / denom))
                .collect()
        };
        let alpha_bars = betas
            .iter()
            .scan(1.0f64, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `t` in `0..=steps`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    fn check_step(&self, t: usize, lowest: usize) -> Result<()> {
        if t < lowest || t > self.steps() {
            return Err(DdmError::InvalidArgument(format!(
                "timestep {t} outside [{lowest}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// x_t = √ᾱ_t · target + √(1 − ᾱ_t) · noise, elementwise.
    pub fn perturb(&self, target: &Volume, t: usize, noise: &Array3<f64>) -> Result<Volume> {
        check_same_shape("perturb: noise vs target", target.shape(), crate::volume::dims(noise))?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut data = target.data.clone();
        data.zip_mut_with(noise, |x, &e| *x = a * *x + b * e);
        Ok(Volume {
            data,
            spacing: target.spacing,
        })
    }
}

/// Uniform draw from `1..=steps`.
pub fn sample_timestep<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> usize {
    assert!(steps >= 1, "schedule has no steps");
    rng.random_range(1..=steps)
}
