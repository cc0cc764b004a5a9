//! Grid containers shared by every module.
//!
//! All grids use axis order `[X, Y, Z]` in voxel index space, with `Z` the
//! through-plane (short) axis and the fastest-varying axis in memory.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};

/// Scalar intensity volume with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f64>, spacing: [f64; 3]) -> Result<Self> {
        let shape = dims(&data);
        if shape.iter().any(|&d| d < 2) {
            return Err(DdmError::IncompatibleShape {
                shape,
                reason: "every axis needs at least 2 voxels".into(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DdmError::NonFinite("volume data".into()));
        }
        Ok(Self { data, spacing })
    }

    /// Unit-spacing volume; used for synthetic and already-resampled data.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        Self::new(data, [1.0; 3])
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array3::zeros(shape),
            spacing: [1.0; 3],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-voxel displacement in voxel units, stored as `[3, X, Y, Z]`.
///
/// Pull convention: output voxel `p` samples its input at `p + field(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub data: Array4<f64>,
}

impl DisplacementField {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(DdmError::shape(
                "displacement field components",
                &[3],
                &data.shape()[..1],
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DdmError::NonFinite("displacement field".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array4::zeros([3, shape[0], shape[1], shape[2]]),
        }
    }

    /// Same displacement at every voxel.
    pub fn constant(shape: [usize; 3], disp: [f64; 3]) -> Self {
        let mut data = Array4::zeros([3, shape[0], shape[1], shape[2]]);
        for (c, mut comp) in data.axis_iter_mut(Axis(0)).enumerate() {
            comp.fill(disp[c]);
        }
        Self { data }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean Euclidean displacement magnitude over voxels.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.shape().iter().product::<usize>();
        if n == 0 {
            return 0.0;
        }
        self.magnitudes().iter().sum::<f64>() / n as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().iter().copied().fold(0.0, f64::max)
    }

    pub fn magnitudes(&self) -> Array3<f64> {
        let mut out = Array3::<f64>::zeros(self.shape());
        for comp in self.data.axis_iter(Axis(0)) {
            out.zip_mut_with(&comp, |o, v| *o += v * v);
        }
        out.mapv_inplace(f64::sqrt);
        out
    }
}

/// Integer label map, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    pub data: Array3<u16>,
}

impl SegmentationMap {
    pub fn new(data: Array3<u16>) -> Self {
        Self { data }
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }

    /// Sorted distinct labels, background included.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.iter().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    /// Sorted distinct foreground labels.
    pub fn foreground_labels(&self) -> Vec<u16> {
        self.labels().into_iter().filter(|&l| l != 0).collect()
    }
}

/// The diffusion module's output: one scalar per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub data: Array3<f64>,
}

impl LatentCode {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DdmError::NonFinite("latent code".into()));
        }
        Ok(Self { data })
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }

    pub fn scaled(&self, gamma: f64) -> LatentCode {
        LatentCode {
            data: self.data.mapv(|v| v * gamma),
        }
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Spatial shape plus serde support; the unit of configuration for image grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape(pub [usize; 3]);

impl GridShape {
    pub fn voxels(&self) -> usize {
        self.0.iter().product()
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

impl std::str::FromStr for GridShape {
    type Err = DdmError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
        if parts.len() != 3 {
            return Err(DdmError::InvalidArgument(format!(
                "shape '{s}' must look like 32x32x8"
            )));
        }
        let mut out = [0usize; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.trim().parse().map_err(|_| {
                DdmError::InvalidArgument(format!("shape '{s}' has a non-integer axis"))
            })?;
        }
        Ok(GridShape(out))
    }
}

pub(crate) fn dims<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

pub(crate) fn check_same_shape(
    context: &'static str,
    expected: [usize; 3],
    found: [usize; 3],
) -> Result<()> {
    if expected != found {
        return Err(DdmError::shape(context, &expected, &found));
    }
    Ok(())
}
