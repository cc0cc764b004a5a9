//! Smooth-blob phantoms deformed by a known smooth field.

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SubjectRecord;
use crate::error::{DdmError, Result};
use crate::field_ops::{scale_field, warp_nearest, warp_trilinear};
use crate::volume::{DisplacementField, SegmentationMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    pub shape: [usize; 3],
    /// Largest displacement magnitude of the ground-truth field, in voxels.
    pub max_disp: f64,
    pub n_frames: usize,
    /// Every axis must be a multiple of this (network downsampling factor).
    pub divisor: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            shape: [32, 32, 8],
            max_disp: 3.0,
            n_frames: 5,
            divisor: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub record: SubjectRecord,
    /// Ground-truth field with `es = warp(ed, field)` exactly.
    pub field: DisplacementField,
}

struct Blob {
    center: [f64; 3],
    sigma: [f64; 3],
    amp: f64,
}

impl Blob {
    fn at(&self, p: [usize; 3]) -> f64 {
        let mut r2 = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - self.center[a]) / self.sigma[a];
            r2 += d * d;
        }
        self.amp * (-0.5 * r2).exp()
    }
}

/// Separable Gaussian blur with a 3σ kernel renormalized at the borders.
pub(crate) fn gaussian_smooth(a: &Array3<f64>, sigma: [f64; 3]) -> Array3<f64> {
    let mut cur = a.clone();
    for (axis, &s) in sigma.iter().enumerate() {
        if s <= 0.0 {
            continue;
        }
        let radius = (3.0 * s).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|d| (-0.5 * (d as f64 / s).powi(2)).exp())
            .collect();
        let mut next = Array3::zeros(cur.raw_dim());
        let n = cur.shape()[axis] as isize;
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(next.lanes_mut(Axis(axis))) {
            for i in 0..n {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, w) in kernel.iter().enumerate() {
                    let j = i + k as isize - radius;
                    if (0..n).contains(&j) {
                        acc += w * src[j as usize];
                        wsum += w;
                    }
                }
                dst[i as usize] = acc / wsum;
            }
        }
        cur = next;
    }
    cur
}

fn check_options(opts: &SyntheticOptions) -> Result<()> {
    let shape = opts.shape;
    if shape.iter().any(|&n| n < 4 || (opts.divisor > 0 && n % opts.divisor != 0)) {
        return Err(DdmError::IncompatibleShape {
            shape,
            reason: format!(
                "synthetic phantoms need axes >= 4 that are multiples of {}",
                opts.divisor
            ),
        });
    }
    let limit = shape[0].min(shape[1]) as f64 / 4.0;
    if !(0.0..=limit).contains(&opts.max_disp) {
        return Err(DdmError::InvalidArgument(format!(
            "max_disp {} must lie in [0, {limit}] for shape {shape:?}",
            opts.max_disp
        )));
    }
    if opts.n_frames < 2 {
        return Err(DdmError::InvalidArgument("n_frames must be >= 2".into()));
    }
    Ok(())
}

/// Source phantom, its labels, and a deformed target.
///
/// The source is a broad background blob plus 1–3 structure blobs, mapped to
/// [-1, 1]. Each structure blob above half its peak gets its own label. The
/// field is in-plane (axes 0 and 1) smoothed noise scaled so its largest
/// magnitude is `max_disp`.
pub fn make_synthetic_pair(seed: u64, opts: &SyntheticOptions) -> Result<SyntheticSubject> {
    check_options(opts)?;
    let shape = opts.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = shape.map(|n| n as f64);

    let mut blobs = vec![Blob {
        center: std::array::from_fn(|a| dims[a] * rng.random_range(0.3..0.7)),
        sigma: std::array::from_fn(|a| dims[a] * rng.random_range(0.45..0.65)),
        amp: rng.random_range(0.6..1.0),
    }];
    let structures = rng.random_range(1..=3);
    for _ in 0..structures {
        blobs.push(Blob {
            center: std::array::from_fn(|a| dims[a] * rng.random_range(0.3..0.7)),
            sigma: [
                dims[0] * rng.random_range(0.07..0.11),
                dims[1] * rng.random_range(0.07..0.11),
                dims[2] * rng.random_range(0.15..0.25),
            ],
            amp: rng.random_range(0.8..1.5) * if rng.random_bool(0.7) { 1.0 } else { -1.0 },
        });
    }
    let raw = Array3::from_shape_fn(shape, |(x, y, z)| {
        blobs.iter().map(|b| b.at([x, y, z])).sum::<f64>()
    });
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let source = Volume::from_array(raw.mapv(|v| 2.0 * (v - lo) / (hi - lo) - 1.0))?;

    let labels = Array3::from_shape_fn(shape, |(x, y, z)| {
        let mut label = 0u16;
        for (i, b) in blobs.iter().enumerate().skip(1) {
            if b.at([x, y, z]).abs() >= 0.5 * b.amp.abs() {
                label = i as u16;
            }
        }
        label
    });
    let ed_seg = SegmentationMap::new(labels);

    let mut field = Array4::<f64>::zeros([3, shape[0], shape[1], shape[2]]);
    let smooth_sigma = [dims[0] / 4.0, dims[1] / 4.0, dims[2] / 4.0];
    for c in 0..2 {
        let noise = Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
        field
            .index_axis_mut(Axis(0), c)
            .assign(&gaussian_smooth(&noise, smooth_sigma));
    }
    let mut field = DisplacementField::new(field)?;
    let peak = field.max_magnitude();
    if peak > 0.0 {
        field.data.mapv_inplace(|v| v * opts.max_disp / peak);
    }
    if opts.max_disp == 0.0 {
        field = DisplacementField::zeros(shape);
    }

    let target = warp_trilinear(&source, &field)?;
    let es_seg = warp_nearest(&ed_seg, &field)?;
    let intermediate = (1..opts.n_frames - 1)
        .map(|k| {
            let gamma = k as f64 / (opts.n_frames - 1) as f64;
            warp_trilinear(&source, &scale_field(&field, gamma)?)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticSubject {
        record: SubjectRecord {
            id: format!("synthetic{seed:04}"),
            ed: source,
            es: target,
            ed_seg: Some(ed_seg),
            es_seg: Some(es_seg),
            n_frames: opts.n_frames,
            intermediate_frames: Some(intermediate),
        },
        field,
    })
}

/// `count` subjects from consecutive seeds.
pub fn make_synthetic_set(seed: u64, count: usize, opts: &SyntheticOptions) -> Result<Vec<SyntheticSubject>> {
    (0..count as u64)
        .map(|i| make_synthetic_pair(seed.wrapping_mul(1000).wrapping_add(i), opts))
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::local_ncc;

    #[test]
    fn zero_displacement_is_identity() {
        let opts = SyntheticOptions {
            max_disp: 0.0,
            ..Default::default()
        };
        let s = make_synthetic_pair(4, &opts).unwrap();
        assert_eq!(s.record.ed, s.record.es);
        assert_eq!(s.record.ed_seg, s.record.es_seg);
    }

    #[test]
    fn deterministic_given_seed() {
        let opts = SyntheticOptions::default();
        assert_eq!(make_synthetic_pair(9, &opts).unwrap(), make_synthetic_pair(9, &opts).unwrap());
        assert_ne!(make_synthetic_pair(9, &opts).unwrap(), make_synthetic_pair(10, &opts).unwrap());
    }

    #[test]
    fn deformation_decorrelates_and_is_exact() {
        let opts = SyntheticOptions::default();
        for seed in 0..4 {
            let s = make_synthetic_pair(seed, &opts).unwrap();
            let r = &s.record;
            assert!((s.field.max_magnitude() - 3.0).abs() < 1e-9);
            assert!(r.ed.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            let st = local_ncc(&r.ed, &r.es, 9).unwrap();
            let tt = local_ncc(&r.es, &r.es, 9).unwrap();
            assert!(st < tt, "seed {seed}: {st} vs {tt}");
            assert_eq!(warp_trilinear(&r.ed, &s.field).unwrap(), r.es);
            assert_eq!(r.intermediate_frames.as_ref().unwrap().len(), opts.n_frames - 2);
            assert!(!r.ed_seg.as_ref().unwrap().foreground_labels().is_empty());
            r.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_options() {
        let bad_shape = SyntheticOptions {
            shape: [30, 32, 8],
            ..Default::default()
        };
        assert!(make_synthetic_pair(0, &bad_shape).is_err());
        let too_far = SyntheticOptions {
            max_disp: 9.0,
            ..Default::default()
        };
        assert!(make_synthetic_pair(0, &too_far).is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let c = Array3::from_elem([6, 5, 4], 2.5);
        let s = gaussian_smooth(&c, [1.0, 2.0, 0.5]);
        assert!(s.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
