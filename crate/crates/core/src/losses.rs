//! Training objectives and evaluation metrics.
//!
//! Every reduction is a voxel mean, so the loss weights do not depend on the
//! grid resolution.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};
use crate::field_ops::spatial_gradient;
use crate::volume::{check_same_shape, dims, DisplacementField, LatentCode, SegmentationMap, Volume};

/// Denominator stabilizer of the local NCC.
pub const NCC_EPS: f64 = 1e-5;
pub const DEFAULT_NCC_WINDOW: usize = 9;
pub const DEFAULT_PSNR_CAP: f64 = 99.0;
/// Dynamic range of intensities normalized to [-1, 1].
pub const PSNR_PEAK: f64 = 2.0;

/// Weights of the composite objective `diffuse + λ·(−NCC + λ_R·smooth)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_r: f64,
    pub ncc_window: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            lambda_r: 1.0,
            ncc_window: DEFAULT_NCC_WINDOW,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diffuse: f64,
    /// The −NCC term.
    pub deform_similarity: f64,
    pub deform_smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(diffuse: f64, similarity: f64, smooth: f64, w: &LossWeights) -> Self {
        Self {
            diffuse,
            deform_similarity: similarity,
            deform_smooth: smooth,
            total: diffuse + w.lambda * (similarity + w.lambda_r * smooth),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.diffuse, self.deform_similarity, self.deform_smooth, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("diffuse", self.diffuse),
            ("deform_similarity", self.deform_similarity),
            ("deform_smooth", self.deform_smooth),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Sum over the in-grid part of a cubic window of radius `r` around every voxel.
pub(crate) fn box_sum(a: &Array3<f64>, r: usize) -> Array3<f64> {
    let mut cur = a.to_owned();
    for axis in 0..3 {
        let n = cur.shape()[axis];
        let mut next = Array3::zeros(cur.raw_dim());
        for (src, mut dst) in cur
            .lanes(Axis(axis))
            .into_iter()
            .zip(next.lanes_mut(Axis(axis)))
        {
            let mut prefix = Vec::with_capacity(n + 1);
            prefix.push(0.0);
            let mut acc = 0.0;
            for &v in src.iter() {
                acc += v;
                prefix.push(acc);
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                dst[i] = prefix[hi + 1] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

fn window_counts(shape: [usize; 3], r: usize) -> Array3<f64> {
    let count = |i: usize, n: usize| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64;
    Array3::from_shape_fn(shape, |(x, y, z)| {
        count(x, shape[0]) * count(y, shape[1]) * count(z, shape[2])
    })
}

fn check_window(shape: [usize; 3], window: usize) -> Result<usize> {
    if window == 0 || window % 2 == 0 {
        return Err(DdmError::InvalidArgument(format!(
            "NCC window must be odd and positive, got {window}"
        )));
    }
    if shape.iter().all(|&n| window > n) {
        return Err(DdmError::InvalidArgument(format!(
            "NCC window {window} exceeds every axis of {shape:?}"
        )));
    }
    Ok(window / 2)
}

struct NccStats {
    n: Array3<f64>,
    si: Array3<f64>,
    sj: Array3<f64>,
    cross: Array3<f64>,
    ivar: Array3<f64>,
    jvar: Array3<f64>,
}

fn ncc_stats(a: &Array3<f64>, b: &Array3<f64>, r: usize) -> NccStats {
    let n = window_counts(dims(a), r);
    let si = box_sum(a, r);
    let sj = box_sum(b, r);
    let sii = box_sum(&(a * a), r);
    let sjj = box_sum(&(b * b), r);
    let sij = box_sum(&(a * b), r);
    let cross = &sij - &(&si * &sj / &n);
    let ivar = &sii - &(&si * &si / &n);
    let jvar = &sjj - &(&sj * &sj / &n);
    NccStats {
        n,
        si,
        sj,
        cross,
        ivar,
        jvar,
    }
}

/// Mean over voxels of the windowed squared correlation
/// `cross² / (var_a·var_b + ε)`; windows are truncated at the grid border.
pub fn local_ncc(a: &Volume, b: &Volume, window: usize) -> Result<f64> {
    check_same_shape("local_ncc", a.shape(), b.shape())?;
    let r = check_window(a.shape(), window)?;
    let s = ncc_stats(&a.data, &b.data, r);
    let total: f64 = ndarray::Zip::from(&s.cross)
        .and(&s.ivar)
        .and(&s.jvar)
        .fold(0.0, |acc, &c, &iv, &jv| acc + c * c / (iv * jv + NCC_EPS));
    Ok(total / a.len() as f64)
}

/// Local NCC together with its gradient with respect to both inputs.
pub fn local_ncc_with_grad(
    a: &Array3<f64>,
    b: &Array3<f64>,
    window: usize,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    check_same_shape("local_ncc", dims(a), dims(b))?;
    let r = check_window(dims(a), window)?;
    let s = ncc_stats(a, b, r);
    let len = a.len() as f64;
    let shape = dims(a);

    // per-window partial derivatives of cc with respect to the window sums
    let mut value = 0.0;
    let mut d_si = Array3::zeros(shape);
    let mut d_sj = Array3::zeros(shape);
    let mut d_sii = Array3::zeros(shape);
    let mut d_sjj = Array3::zeros(shape);
    let mut d_sij = Array3::zeros(shape);
    ndarray::Zip::indexed(&s.cross).for_each(|p, &cross| {
        let (n, si, sj, iv, jv) = (s.n[p], s.si[p], s.sj[p], s.ivar[p], s.jvar[p]);
        let den = iv * jv + NCC_EPS;
        value += cross * cross / den;
        let d_cross = 2.0 * cross / den;
        let k = cross * cross / (den * den);
        let d_iv = -k * jv;
        let d_jv = -k * iv;
        d_sij[p] = d_cross;
        d_sii[p] = d_iv;
        d_sjj[p] = d_jv;
        d_si[p] = -d_cross * sj / n - 2.0 * d_iv * si / n;
        d_sj[p] = -d_cross * si / n - 2.0 * d_jv * sj / n;
    });
    // windows are symmetric, so the adjoint of a window sum is the same box sum
    let (b_si, b_sj) = (box_sum(&d_si, r), box_sum(&d_sj, r));
    let (b_sii, b_sjj, b_sij) = (box_sum(&d_sii, r), box_sum(&d_sjj, r), box_sum(&d_sij, r));
    let mut ga = Array3::zeros(shape);
    let mut gb = Array3::zeros(shape);
    ndarray::Zip::indexed(&mut ga).and(&mut gb).for_each(|p, ga, gb| {
        let (x, y) = (a[p], b[p]);
        *ga = (b_si[p] + 2.0 * x * b_sii[p] + y * b_sij[p]) / len;
        *gb = (b_sj[p] + 2.0 * y * b_sjj[p] + x * b_sij[p]) / len;
    });
    Ok((value / len, ga, gb))
}

/// Voxel mean of the summed squared forward differences over all 9
/// component/axis pairs.
pub fn smoothness_penalty(field: &DisplacementField) -> f64 {
    let n = field.shape().iter().product::<usize>() as f64;
    spatial_gradient(field)
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Gradient of [`smoothness_penalty`] with respect to the field components.
pub fn smoothness_penalty_grad(field: &DisplacementField) -> Array4<f64> {
    let n = field.shape().iter().product::<usize>() as f64;
    let grads = spatial_gradient(field);
    let mut out = Array4::zeros(field.data.raw_dim());
    for (c, row) in grads.iter().enumerate() {
        let mut comp = out.index_axis_mut(Axis(0), c);
        for (a, d) in row.iter().enumerate() {
            let len = d.shape()[a];
            if len < 2 {
                continue;
            }
            let scaled = d.slice_axis(Axis(a), (0..len - 1).into()).mapv(|v| 2.0 * v / n);
            {
                let mut hi = comp.slice_axis_mut(Axis(a), (1..len).into());
                hi += &scaled;
            }
            let mut lo = comp.slice_axis_mut(Axis(a), (0..len - 1).into());
            lo -= &scaled;
        }
    }
    out
}

/// Mean squared error between the latent code and the noise draw.
pub fn diffusion_loss(code: &LatentCode, noise: &Array3<f64>) -> Result<f64> {
    check_same_shape("diffusion_loss", code.shape(), dims(noise))?;
    Ok(mse(&code.data, noise))
}

pub(crate) fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    ndarray::Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
        / a.len() as f64
}

pub fn total_loss(
    code: &LatentCode,
    noise: &Array3<f64>,
    warped: &Volume,
    target: &Volume,
    field: &DisplacementField,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let diffuse = diffusion_loss(code, noise)?;
    check_same_shape("total_loss: field vs target", target.shape(), field.shape())?;
    let similarity = -local_ncc(warped, target, weights.ncc_window)?;
    let smooth = smoothness_penalty(field);
    Ok(LossBreakdown::compose(diffuse, similarity, smooth, weights))
}

pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    psnr_with(a, b, PSNR_PEAK, DEFAULT_PSNR_CAP)
}

/// `10·log10(peak² / MSE)`, returning `cap` when the MSE is below 1e-12.
pub fn psnr_with(a: &Volume, b: &Volume, peak: f64, cap: f64) -> Result<f64> {
    check_same_shape("psnr", a.shape(), b.shape())?;
    let m = mse(&a.data, &b.data);
    if m < 1e-12 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(cap))
}

/// `Σ(a − reference)² / Σ reference²`.
pub fn nmse(a: &Volume, reference: &Volume) -> Result<f64> {
    check_same_shape("nmse", a.shape(), reference.shape())?;
    let energy: f64 = reference.data.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(DdmError::InvalidArgument("nmse reference has zero energy".into()));
    }
    let err: f64 = ndarray::Zip::from(&a.data)
        .and(&reference.data)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    Ok(err / energy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: Vec<(u16, f64)>,
    pub mean: f64,
}

/// Per-label Dice overlap; a label absent from both maps scores 1.
pub fn dice(pred: &SegmentationMap, truth: &SegmentationMap, labels: &[u16]) -> Result<DiceScores> {
    check_same_shape("dice", pred.shape(), truth.shape())?;
    if labels.is_empty() {
        return Err(DdmError::InvalidArgument("dice needs at least one label".into()));
    }
    let per_label: Vec<(u16, f64)> = labels
        .iter()
        .map(|&l| {
            let (mut both, mut np, mut nt) = (0usize, 0usize, 0usize);
            for (&p, &t) in pred.data.iter().zip(truth.data.iter()) {
                let (ip, it) = (p == l, t == l);
                np += ip as usize;
                nt += it as usize;
                both += (ip && it) as usize;
            }
            let score = if np + nt == 0 {
                1.0
            } else {
                2.0 * both as f64 / (np + nt) as f64
            };
            (l, score)
        })
        .collect();
    let mean = per_label.iter().map(|(_, s)| s).sum::<f64>() / per_label.len() as f64;
    Ok(DiceScores { per_label, mean })
}
