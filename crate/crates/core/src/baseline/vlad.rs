//! VLAD: per-cluster sums of residuals `x_i - mu_k`, concatenated and
//! L2-normalised.

use super::kmeans::{sq_dist, Codebook};
use crate::error::{Error, Result};
use crate::image::{resize_area, RgbImage};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assignment {
    /// Weight 1 on the nearest center.
    Hard,
    /// Weights `softmax(-beta * |x - mu_k|^2)` over centers.
    Soft { beta: f64 },
}

/// Assignment weights `q_i` of one local feature; they sum to 1.
pub fn assignment_weights<T: Real>(x: &[T], cb: &Codebook<T>, mode: Assignment) -> Vec<T> {
    match mode {
        Assignment::Hard => {
            let mut q = vec![T::zero(); cb.k()];
            q[cb.nearest(x)] = T::one();
            q
        }
        Assignment::Soft { beta } => {
            let logits: Vec<T> = cb.centers().iter().map(|c| -T::lit(beta) * sq_dist(x, c)).collect();
            crate::capsule::routing::soft_assignment(&logits)
        }
    }
}

/// Unnormalised VLAD vector `concat_k sum_i q_ik (x_i - mu_k)`.
pub fn vlad_residuals<T: Real>(xs: &[Vec<T>], cb: &Codebook<T>, mode: Assignment) -> Result<Vec<T>> {
    if xs.is_empty() {
        return Err(Error::invalid("vlad_encode", "no local features"));
    }
    let d = cb.dim();
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::shape("vlad_encode", &[bad.len()], &[d]));
    }
    let mut v = vec![T::zero(); cb.k() * d];
    for x in xs {
        let q = assignment_weights(x, cb, mode);
        for (k, (c, &w)) in cb.centers().iter().zip(&q).enumerate() {
            if w == T::zero() {
                continue;
            }
            for ((o, &xi), &ci) in v[k * d..(k + 1) * d].iter_mut().zip(x).zip(c) {
                *o += w * (xi - ci);
            }
        }
    }
    Ok(v)
}

/// VLAD descriptor; an all-zero residual vector stays zero.
pub fn vlad_encode<T: Real>(xs: &[Vec<T>], cb: &Codebook<T>, mode: Assignment) -> Result<Vec<T>> {
    let mut v = vlad_residuals(xs, cb, mode)?;
    let n = v.iter().map(|&a| a * a).sum::<T>().sqrt();
    if n > T::zero() {
        v.iter_mut().for_each(|a| *a /= n);
    }
    Ok(v)
}

/// Side of the grid of cells an image is cut into for local descriptors.
pub const LOCAL_GRID: usize = 8;
/// Each cell is reduced to `LOCAL_CELL x LOCAL_CELL` gray values.
pub const LOCAL_CELL: usize = 4;

/// Dense local descriptors: the gray image is cut into an 8x8 grid of
/// cells, each box-filtered to 4x4 and standardised to zero mean and unit
/// norm (flat cells give the zero vector).
pub fn local_descriptors(image: &RgbImage) -> Result<Vec<Vec<f32>>> {
    let (h, w) = (image.height, image.width);
    if h % LOCAL_GRID != 0 || w % LOCAL_GRID != 0 || h / LOCAL_GRID < LOCAL_CELL || w / LOCAL_GRID < LOCAL_CELL {
        return Err(Error::invalid("local_descriptors", format!("{w}x{h} image not divisible into {LOCAL_GRID}x{LOCAL_GRID} cells")));
    }
    let gray = image.gray();
    let (ch, cw) = (h / LOCAL_GRID, w / LOCAL_GRID);
    let mut out = Vec::with_capacity(LOCAL_GRID * LOCAL_GRID);
    for gy in 0..LOCAL_GRID {
        for gx in 0..LOCAL_GRID {
            let cell: Vec<f32> = (0..ch)
                .flat_map(|y| gray[(gy * ch + y) * w + gx * cw..(gy * ch + y) * w + (gx + 1) * cw].iter().copied())
                .collect();
            let mut d = resize_area(&cell, ch, cw, LOCAL_CELL, LOCAL_CELL);
            let m = d.iter().sum::<f32>() / d.len() as f32;
            d.iter_mut().for_each(|v| *v -= m);
            let n = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n > 1e-6 {
                d.iter_mut().for_each(|v| *v /= n);
            } else {
                d.iter_mut().for_each(|v| *v = 0.0);
            }
            out.push(d);
        }
    }
    Ok(out)
}
