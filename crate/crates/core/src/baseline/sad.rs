//! Raw-image descriptors in the SeqSLAM style: gray, box-downsampled, and
//! normalised per P x P patch.

use crate::error::{Error, Result};
use crate::image::{resize_area, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SadConfig {
    pub size: usize,
    /// Patch side for mean/std normalisation; `None` disables it.
    pub patch: Option<usize>,
}

impl Default for SadConfig {
    fn default() -> Self {
        Self { size: 32, patch: Some(8) }
    }
}

pub fn sad_descriptor(image: &RgbImage, cfg: &SadConfig) -> Result<Vec<f32>> {
    if cfg.size == 0 || cfg.size > image.width.min(image.height) {
        return Err(Error::invalid("sad_descriptor", format!("size {} for a {}x{} image", cfg.size, image.width, image.height)));
    }
    let mut d = resize_area(&image.gray(), image.height, image.width, cfg.size, cfg.size);
    if let Some(p) = cfg.patch {
        if p == 0 || !cfg.size.is_multiple_of(p) {
            return Err(Error::invalid("sad_descriptor", format!("patch {p} does not tile size {}", cfg.size)));
        }
        normalise_patches(&mut d, cfg.size, p);
    }
    Ok(d)
}

/// Standardises each P x P block in place; flat blocks become zero.
fn normalise_patches(d: &mut [f32], size: usize, p: usize) {
    for by in (0..size).step_by(p) {
        for bx in (0..size).step_by(p) {
            let idx = |i: usize| (by + i / p) * size + bx + i % p;
            let n = (p * p) as f32;
            let mean = (0..p * p).map(|i| d[idx(i)]).sum::<f32>() / n;
            let var = (0..p * p).map(|i| (d[idx(i)] - mean).powi(2)).sum::<f32>() / n;
            let sd = var.sqrt();
            for i in 0..p * p {
                d[idx(i)] = if sd > 1e-6 { (d[idx(i)] - mean) / sd } else { 0.0 };
            }
        }
    }
}

/// Mean absolute difference.
pub fn sad_distance(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("sad_distance", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.len() as f32)
}
