//! Geometric kernel: warping by displacement fields, finite differences, field scaling.

use ndarray::{Array3, Array4, Axis};

use crate::error::{DdmError, Result};
use crate::volume::{check_same_shape, DisplacementField, SegmentationMap, Volume};

/// Clamped sample position along one axis: lower corner, fractional offset, and
/// whether the position was inside the grid (so the derivative passes through).
#[inline]
fn locate(c: f64, n: usize) -> (usize, f64, bool) {
    let max = (n - 1) as f64;
    let (c, inside) = if c < 0.0 {
        (0.0, false)
    } else if c > max {
        (max, false)
    } else {
        (c, true)
    };
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, c - i0 as f64, inside)
}

/// Trilinear sample at a continuous index position, clamped to the border.
pub fn sample_trilinear(vol: &Array3<f64>, pos: [f64; 3]) -> f64 {
    let shape = crate::volume::dims(vol);
    let (x0, fx, _) = locate(pos[0], shape[0]);
    let (y0, fy, _) = locate(pos[1], shape[1]);
    let (z0, fz, _) = locate(pos[2], shape[2]);
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                acc += wx * wy * wz * vol[[x0 + dx, y0 + dy, z0 + dz]];
            }
        }
    }
    acc
}

fn check_pair(vol_shape: [usize; 3], field: &DisplacementField) -> Result<()> {
    check_same_shape("warp: field vs volume", vol_shape, field.shape())?;
    if !field.is_finite() {
        return Err(DdmError::NonFinite("warp displacement field".into()));
    }
    Ok(())
}

/// Backward (pull) warp with trilinear interpolation and border replication.
pub fn warp_trilinear(vol: &Volume, field: &DisplacementField) -> Result<Volume> {
    Ok(Volume {
        data: warp_array(&vol.data, field)?,
        spacing: vol.spacing,
    })
}

/// Array-level warp, shared with the autograd tape.
pub fn warp_array(vol: &Array3<f64>, field: &DisplacementField) -> Result<Array3<f64>> {
    let shape = crate::volume::dims(vol);
    check_pair(shape, field)?;
    let [nx, ny, nz] = shape;
    let src = vol.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let f = field.data.as_standard_layout();
    let f = f.as_slice().expect("standard layout");
    let n = nx * ny * nz;
    let (syz, sz) = (ny * nz, nz);

    let mut out = vec![0.0; n];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = x * syz + y * sz + z;
                let (x0, fx, _) = locate(x as f64 + f[p], nx);
                let (y0, fy, _) = locate(y as f64 + f[n + p], ny);
                let (z0, fz, _) = locate(z as f64 + f[2 * n + p], nz);
                let b = x0 * syz + y0 * sz + z0;
                let c00 = src[b] * (1.0 - fz) + src[b + 1] * fz;
                let c01 = src[b + sz] * (1.0 - fz) + src[b + sz + 1] * fz;
                let c10 = src[b + syz] * (1.0 - fz) + src[b + syz + 1] * fz;
                let c11 = src[b + syz + sz] * (1.0 - fz) + src[b + syz + sz + 1] * fz;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                out[p] = c0 * (1.0 - fx) + c1 * fx;
            }
        }
    }
    Ok(Array3::from_shape_vec(shape, out).expect("shape preserved"))
}

/// Vector-Jacobian product of [`warp_array`].
///
/// Returns gradients with respect to the source intensities and the field
/// components. Components whose sample coordinate was clamped get zero gradient.
pub fn warp_array_backward(
    vol: &Array3<f64>,
    field: &DisplacementField,
    grad_out: &Array3<f64>,
) -> Result<(Array3<f64>, Array4<f64>)> {
    let shape = crate::volume::dims(vol);
    check_pair(shape, field)?;
    check_same_shape("warp backward: upstream gradient", shape, crate::volume::dims(grad_out))?;
    let [nx, ny, nz] = shape;
    let src = vol.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let f = field.data.as_standard_layout();
    let f = f.as_slice().expect("standard layout");
    let g = grad_out.as_standard_layout();
    let g = g.as_slice().expect("standard layout");
    let n = nx * ny * nz;
    let (syz, sz) = (ny * nz, nz);

    let mut gv = vec![0.0; n];
    let mut gf = vec![0.0; 3 * n];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = x * syz + y * sz + z;
                let go = g[p];
                if go == 0.0 {
                    continue;
                }
                let (x0, fx, in_x) = locate(x as f64 + f[p], nx);
                let (y0, fy, in_y) = locate(y as f64 + f[n + p], ny);
                let (z0, fz, in_z) = locate(z as f64 + f[2 * n + p], nz);
                let b = x0 * syz + y0 * sz + z0;
                let v = [
                    src[b],
                    src[b + 1],
                    src[b + sz],
                    src[b + sz + 1],
                    src[b + syz],
                    src[b + syz + 1],
                    src[b + syz + sz],
                    src[b + syz + sz + 1],
                ];
                let wx = [1.0 - fx, fx];
                let wy = [1.0 - fy, fy];
                let wz = [1.0 - fz, fz];
                let idx = [
                    b,
                    b + 1,
                    b + sz,
                    b + sz + 1,
                    b + syz,
                    b + syz + 1,
                    b + syz + sz,
                    b + syz + sz + 1,
                ];
                let (mut dx, mut dy, mut dz) = (0.0, 0.0, 0.0);
                for (k, (&val, &i)) in v.iter().zip(idx.iter()).enumerate() {
                    let (ix, iy, iz) = (k >> 2, (k >> 1) & 1, k & 1);
                    gv[i] += go * wx[ix] * wy[iy] * wz[iz];
                    let sx = if ix == 1 { 1.0 } else { -1.0 };
                    let sy = if iy == 1 { 1.0 } else { -1.0 };
                    let sz_ = if iz == 1 { 1.0 } else { -1.0 };
                    dx += val * sx * wy[iy] * wz[iz];
                    dy += val * wx[ix] * sy * wz[iz];
                    dz += val * wx[ix] * wy[iy] * sz_;
                }
                if in_x {
                    gf[p] = go * dx;
                }
                if in_y {
                    gf[n + p] = go * dy;
                }
                if in_z {
                    gf[2 * n + p] = go * dz;
                }
            }
        }
    }
    Ok((
        Array3::from_shape_vec(shape, gv).expect("shape preserved"),
        Array4::from_shape_vec([3, nx, ny, nz], gf).expect("shape preserved"),
    ))
}

/// Label warp: nearest-integer rounding of `p + field(p)`, clamped to the grid.
pub fn warp_nearest(seg: &SegmentationMap, field: &DisplacementField) -> Result<SegmentationMap> {
    let shape = seg.shape();
    check_pair(shape, field)?;
    let [nx, ny, nz] = shape;
    let round = |c: f64, n: usize| -> usize { c.round().clamp(0.0, (n - 1) as f64) as usize };
    let out = Array3::from_shape_fn(shape, |(x, y, z)| {
        let sx = round(x as f64 + field.data[[0, x, y, z]], nx);
        let sy = round(y as f64 + field.data[[1, x, y, z]], ny);
        let sz = round(z as f64 + field.data[[2, x, y, z]], nz);
        seg.data[[sx, sy, sz]]
    });
    Ok(SegmentationMap::new(out))
}

/// Forward differences of each field component along each axis.
///
/// Entry `[component][axis]` holds `field_c(p + e_axis) - field_c(p)`, with the
/// last index along `axis` defined as 0.
pub fn spatial_gradient(field: &DisplacementField) -> [[Array3<f64>; 3]; 3] {
    let shape = field.shape();
    std::array::from_fn(|c| {
        let comp = field.data.index_axis(Axis(0), c);
        std::array::from_fn(|a| {
            let mut d = Array3::zeros(shape);
            let n = shape[a];
            if n > 1 {
                let hi = comp.slice_axis(Axis(a), (1..n).into());
                let lo = comp.slice_axis(Axis(a), (0..n - 1).into());
                let mut dst = d.slice_axis_mut(Axis(a), (0..n - 1).into());
                dst.assign(&hi);
                dst -= &lo;
            }
            d
        })
    })
}

/// Multiplies every displacement by `gamma` in `[0, 1]`.
pub fn scale_field(field: &DisplacementField, gamma: f64) -> Result<DisplacementField> {
    check_gamma(gamma)?;
    Ok(DisplacementField {
        data: field.data.mapv(|v| v * gamma),
    })
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DdmError::InvalidArgument(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}
