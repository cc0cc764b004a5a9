//! Mid-slice PNG strip of a frame sequence.

use std::path::Path;

use ddm_core::Volume;
use image::{GrayImage, Luma};

const SCALE: u32 = 4;
const GAP: u32 = 2;

/// Lays the through-plane middle slice of each frame side by side, mapping
/// [-1, 1] to black..white.
pub fn montage(frames: &[&Volume]) -> GrayImage {
    let Some(first) = frames.first() else {
        return GrayImage::new(1, 1);
    };
    let [nx, ny, nz] = first.shape();
    let (w, h) = (ny as u32 * SCALE, nx as u32 * SCALE);
    let width = frames.len() as u32 * (w + GAP) - GAP;
    let mut img = GrayImage::from_pixel(width, h, Luma([0]));
    for (k, f) in frames.iter().enumerate() {
        let z = nz / 2;
        let x0 = k as u32 * (w + GAP);
        for px in 0..w {
            for py in 0..h {
                let v = f.data[[(py / SCALE) as usize, (px / SCALE) as usize, z]];
                let g = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                img.put_pixel(x0 + px, py, Luma([g]));
            }
        }
    }
    img
}

pub fn save_montage(path: &Path, frames: &[&Volume]) -> anyhow::Result<()> {
    montage(frames).save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn strip_geometry_and_levels() {
        let a = Volume::new(Array3::from_elem([8, 6, 4], -1.0), [1.0; 3]).unwrap();
        let b = Volume::new(Array3::from_elem([8, 6, 4], 1.0), [1.0; 3]).unwrap();
        let img = montage(&[&a, &b, &a]);
        assert_eq!(img.dimensions(), (3 * 6 * SCALE + 2 * GAP, 8 * SCALE));
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(6 * SCALE + GAP, 0)[0], 255);
    }
}
