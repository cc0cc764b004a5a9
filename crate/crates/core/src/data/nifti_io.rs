//! NIfTI-1 reading and writing.
//!
//! Arrays use the file's voxel index order `(i, j, k)` as the fixed axis order
//! `[X, Y, Z]`; spacing comes from `pixdim[1..4]`.

use std::path::Path;

use ndarray::{Array3, Array4, Axis, Ix3, Ix4};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{DdmError, Result};
use crate::volume::{DisplacementField, SegmentationMap, Volume};

/// Intensity grid exactly as stored, before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    pub data: Array3<f64>,
    pub spacing: [f64; 3],
}

fn read_err(path: &Path, reason: impl ToString) -> DdmError {
    DdmError::Read {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read_array(path: &Path) -> Result<(ndarray::ArrayD<f64>, [f64; 3])> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| read_err(path, e))?;
    let h = obj.header();
    let spacing = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64];
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(read_err(path, format!("missing or invalid voxel spacing {spacing:?}")));
    }
    let data = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| read_err(path, e))?;
    Ok((data, spacing))
}

fn squeeze3(path: &Path, data: ndarray::ArrayD<f64>) -> Result<Array3<f64>> {
    let mut data = data;
    while data.ndim() > 3 && data.shape()[data.ndim() - 1] == 1 {
        let last = Axis(data.ndim() - 1);
        data = data.index_axis_move(last, 0);
    }
    data.into_dimensionality::<Ix3>()
        .map_err(|_| read_err(path, "expected a 3D volume"))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<RawVolume> {
    let path = path.as_ref();
    let (data, spacing) = read_array(path)?;
    let data = squeeze3(path, data)?;
    if !data.iter().all(|v| v.is_finite()) {
        return Err(read_err(path, "non-finite intensities"));
    }
    Ok(RawVolume { data, spacing })
}

/// All frames of a 3D+t file.
pub fn load_volume_4d(path: impl AsRef<Path>) -> Result<(Vec<Array3<f64>>, [f64; 3])> {
    let path = path.as_ref();
    let (data, spacing) = read_array(path)?;
    let data = data
        .into_dimensionality::<Ix4>()
        .map_err(|_| read_err(path, "expected a 4D (3D+t) volume"))?;
    let frames = data.axis_iter(Axis(3)).map(|f| f.to_owned()).collect();
    Ok((frames, spacing))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(Array3<u16>, [f64; 3])> {
    let raw = load_volume(path.as_ref())?;
    if raw.data.iter().any(|&v| v < 0.0 || v > u16::MAX as f64) {
        return Err(read_err(path.as_ref(), "labels must be non-negative integers"));
    }
    Ok((raw.data.mapv(|v| v.round() as u16), raw.spacing))
}

fn header_with_spacing(spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    // millimetres
    h.xyzt_units = 2;
    h
}

fn write_err(path: &Path, e: nifti::NiftiError) -> DdmError {
    DdmError::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

/// Writes intensities as 64-bit floats (`.nii` or `.nii.gz` by extension).
pub fn save_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    let header = header_with_spacing(vol.spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&vol.data.as_standard_layout())
        .map_err(|e| write_err(path, e))
}

pub fn save_labels(path: impl AsRef<Path>, seg: &SegmentationMap, spacing: [f64; 3]) -> Result<()> {
    let path = path.as_ref();
    let header = header_with_spacing(spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&seg.data.as_standard_layout())
        .map_err(|e| write_err(path, e))
}

/// Writes equally shaped frames as one 3D+t image.
pub fn save_volume_4d(path: impl AsRef<Path>, frames: &[Volume]) -> Result<()> {
    let path = path.as_ref();
    let first = frames
        .first()
        .ok_or_else(|| DdmError::InvalidArgument("no frames to write".into()))?;
    let [nx, ny, nz] = first.shape();
    for f in frames {
        crate::volume::check_same_shape("4D frame", first.shape(), f.shape())?;
    }
    let data = Array4::from_shape_fn([nx, ny, nz, frames.len()], |(x, y, z, t)| frames[t].data[[x, y, z]]);
    let mut header = header_with_spacing(first.spacing);
    header.pixdim[4] = 1.0;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| write_err(path, e))
}

/// Writes a field as a 4D `X × Y × Z × 3` image.
pub fn save_field(path: impl AsRef<Path>, field: &DisplacementField, spacing: [f64; 3]) -> Result<()> {
    let path = path.as_ref();
    let header = header_with_spacing(spacing);
    let [nx, ny, nz] = field.shape();
    let data = Array4::from_shape_fn([nx, ny, nz, 3], |(x, y, z, c)| field.data[[c, x, y, z]]);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| write_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn volume_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array3::from_shape_fn([6, 5, 4], |_| rng.random_range(-1.0..1.0));
        let vol = Volume::new(data, [1.5, 1.5, 3.15]).unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let path = dir.path().join(name);
            save_volume(&path, &vol).unwrap();
            let back = load_volume(&path).unwrap();
            assert_eq!(back.data, vol.data);
            assert_eq!(back.spacing, [1.5, 1.5, 3.15f32 as f64]);
        }
    }

    #[test]
    fn spacing_is_surfaced_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii.gz");
        let vol = Volume::new(Array3::zeros([4, 4, 3]), [1.37, 1.37, 10.0]).unwrap();
        save_volume(&path, &vol).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.spacing, [1.37f32 as f64, 1.37f32 as f64, 10.0]);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let vol = Volume::new(Array3::from_elem([8, 8, 8], 0.5), [1.0; 3]).unwrap();
        save_volume(&path, &vol).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(matches!(err, DdmError::Read { .. }), "{err}");
        assert!(load_volume(dir.path().join("missing.nii")).is_err());
    }

    #[test]
    fn labels_and_fields_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seg = SegmentationMap::new(Array3::from_shape_fn([4, 3, 2], |(x, y, _)| (x + y) as u16));
        let p = dir.path().join("l.nii.gz");
        save_labels(&p, &seg, [1.0; 3]).unwrap();
        assert_eq!(load_labels(&p).unwrap().0, seg.data);

        let field = DisplacementField::constant([4, 3, 2], [0.5, -1.0, 2.0]);
        let fp = dir.path().join("f.nii.gz");
        save_field(&fp, &field, [1.0; 3]).unwrap();
        let (frames, _) = load_volume_4d(&fp).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames[1].iter().all(|&v| v == -1.0));

        let seq: Vec<_> = (0..4).map(|k| Volume::new(Array3::from_elem([4, 3, 2], k as f64), [2.0; 3]).unwrap()).collect();
        let sp = dir.path().join("seq.nii.gz");
        save_volume_4d(&sp, &seq).unwrap();
        let (back, spacing) = load_volume_4d(&sp).unwrap();
        assert_eq!(spacing, [2.0; 3]);
        assert_eq!(back, seq.iter().map(|v| v.data.clone()).collect::<Vec<_>>());
    }
}
