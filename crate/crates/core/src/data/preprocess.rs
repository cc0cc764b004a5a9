//! Resample to a fixed spacing, center crop or pad, then min-max map to [-1, 1].

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::RawVolume;
use crate::error::{DdmError, Result};
use crate::field_ops::sample_trilinear;
use crate::volume::{dims, SegmentationMap, Volume};

/// Millimetre spacing every scan is resampled to.
pub const TARGET_SPACING: [f64; 3] = [1.5, 1.5, 3.15];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub target_spacing: [f64; 3],
    pub target_shape: [usize; 3],
    /// Percentiles (e.g. 1, 99) clipped before the intensity map. Off by default.
    pub clip_percentiles: Option<(f64, f64)>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            target_spacing: TARGET_SPACING,
            target_shape: [128, 128, 32],
            clip_percentiles: None,
        }
    }
}

fn resampled_dims(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| ((shape[a] as f64 * spacing[a] / target[a]).round() as usize).max(2))
}

/// Grid-aligned resampling: output index `i` sits at input index `i·target/spacing`.
fn resample_linear(data: &Array3<f64>, spacing: [f64; 3], target: [f64; 3]) -> Array3<f64> {
    if spacing == target {
        return data.clone();
    }
    let out = resampled_dims(dims(data), spacing, target);
    let ratio: [f64; 3] = std::array::from_fn(|a| target[a] / spacing[a]);
    Array3::from_shape_fn(out, |(x, y, z)| {
        sample_trilinear(
            data,
            [x as f64 * ratio[0], y as f64 * ratio[1], z as f64 * ratio[2]],
        )
    })
}

fn resample_nearest(data: &Array3<u16>, spacing: [f64; 3], target: [f64; 3]) -> Array3<u16> {
    if spacing == target {
        return data.clone();
    }
    let shape = dims(data);
    let out = resampled_dims(shape, spacing, target);
    let idx = |i: usize, a: usize| -> usize {
        ((i as f64 * target[a] / spacing[a]).round() as usize).min(shape[a] - 1)
    };
    Array3::from_shape_fn(out, |(x, y, z)| data[[idx(x, 0), idx(y, 1), idx(z, 2)]])
}

/// Center crop or zero-pad each axis to `target`.
fn crop_or_pad<T: Copy + Default>(data: &Array3<T>, target: [usize; 3]) -> Array3<T> {
    let shape = dims(data);
    if shape == target {
        return data.clone();
    }
    // (source start, destination start, length) per axis
    let plan: [(usize, usize, usize); 3] = std::array::from_fn(|a| {
        if shape[a] >= target[a] {
            ((shape[a] - target[a]) / 2, 0, target[a])
        } else {
            (0, (target[a] - shape[a]) / 2, shape[a])
        }
    });
    let mut out = Array3::from_elem(target, T::default());
    for x in 0..plan[0].2 {
        for y in 0..plan[1].2 {
            for z in 0..plan[2].2 {
                out[[plan[0].1 + x, plan[1].1 + y, plan[2].1 + z]] =
                    data[[plan[0].0 + x, plan[1].0 + y, plan[2].0 + z]];
            }
        }
    }
    out
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resample, crop/pad, then normalize (in that order).
pub fn preprocess(raw: &RawVolume, opts: &PreprocessOptions) -> Result<Volume> {
    let resampled = resample_linear(&raw.data, raw.spacing, opts.target_spacing);
    let mut data = crop_or_pad(&resampled, opts.target_shape);
    if let Some((lo_q, hi_q)) = opts.clip_percentiles {
        let mut sorted: Vec<f64> = data.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (percentile(&sorted, lo_q), percentile(&sorted, hi_q));
        data.mapv_inplace(|v| v.clamp(lo, hi));
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return Err(DdmError::InvalidArgument(format!(
            "degenerate intensity range [{lo}, {hi}]"
        )));
    }
    let scale = 2.0 / (hi - lo);
    data.mapv_inplace(|v| ((v - lo) * scale - 1.0).clamp(-1.0, 1.0));
    Volume::new(data, opts.target_spacing)
}

/// Same geometry path as [`preprocess`] with nearest-neighbour sampling.
pub fn preprocess_labels(labels: &Array3<u16>, spacing: [f64; 3], opts: &PreprocessOptions) -> SegmentationMap {
    let resampled = resample_nearest(labels, spacing, opts.target_spacing);
    SegmentationMap::new(crop_or_pad(&resampled, opts.target_shape))
}
