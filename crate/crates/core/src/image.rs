//! RGB frames as floats in [0, 1], interleaved (height, width, channel).

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::invalid("image", format!("{} values for {width}x{height}x3", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Quantises to 8 bits with rounding; values are clamped to [0, 1].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Luma with Rec. 601 weights.
    pub fn gray(&self) -> Vec<f32> {
        self.data.chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// Box-filter resize of every channel; a no-op copy at the same size.
    pub fn resized(&self, out_h: usize, out_w: usize) -> RgbImage {
        if (out_h, out_w) == (self.height, self.width) {
            return self.clone();
        }
        let planes: Vec<Vec<f32>> = (0..3)
            .map(|c| {
                let plane: Vec<f32> = self.data.iter().skip(c).step_by(3).copied().collect();
                resize_area(&plane, self.height, self.width, out_h, out_w)
            })
            .collect();
        let data = (0..out_h * out_w).flat_map(|p| planes.iter().map(move |pl| pl[p])).collect();
        RgbImage { width: out_w, height: out_h, data }
    }

    /// Planar `[3, H, W]` copy for the networks.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            T::lit(self.data[p * 3 + c] as f64)
        })
    }
}

/// Stacks images into a `[B, 3, H, W]` batch.
pub fn batch_chw<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("batch", "no images"))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|im| im.height != h || im.width != w) {
        return Err(Error::invalid("batch", "images differ in size"));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        data.extend_from_slice(im.to_chw::<T>().data());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Box-filter resize of a single-channel plane.
pub fn resize_area(src: &[f32], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1) = (oy * height / out_h, ((oy + 1) * height).div_ceil(out_h));
        for ox in 0..out_w {
            let (x0, x1) = (ox * width / out_w, ((ox + 1) * width).div_ceil(out_w));
            let mut s = 0.0;
            for y in y0..y1 {
                s += src[y * width + x0..y * width + x1].iter().sum::<f32>();
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f32);
        }
    }
    out
}
