use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Photometric condition: hue rotation (degrees), brightness gain, blend
/// towards mid gray with weight `fog`, and additive Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionSpec {
    pub hue_shift: f64,
    pub gain: f64,
    pub fog: f64,
    pub noise: f64,
}

pub const FOG_GRAY: f32 = 0.5;

impl ConditionSpec {
    pub fn identity() -> Self {
        Self { hue_shift: 0.0, gain: 1.0, fog: 0.0, noise: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.hue_shift.is_finite() && self.gain >= 0.0 && (0.0..=1.0).contains(&self.fog) && self.noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid condition {self:?}")))
        }
    }
}

/// Applies hue, gain, fog, then noise, clamping to [0, 1]. Geometry is
/// untouched: every step is per pixel.
pub fn apply_condition<R: Rng>(image: &RgbImage, spec: &ConditionSpec, rng: &mut R) -> RgbImage {
    let normal = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise as f32).expect("sigma checked"));
    let (gain, fog) = (spec.gain as f32, spec.fog as f32);
    let mut data = Vec::with_capacity(image.data.len());
    for p in image.data.chunks(3) {
        let mut c = [p[0], p[1], p[2]];
        if spec.hue_shift != 0.0 {
            let (h, s, v) = rgb_to_hsv(c);
            c = hsv_to_rgb((h + spec.hue_shift as f32).rem_euclid(360.0), s, v);
        }
        for ch in &mut c {
            let mut x = (*ch * gain).min(1.0);
            x = (1.0 - fog) * x + fog * FOG_GRAY;
            if let Some(n) = &normal {
                x += n.sample(rng);
            }
            *ch = x.clamp(0.0, 1.0);
        }
        data.extend_from_slice(&c);
    }
    RgbImage::new(image.width, image.height, data).expect("same size")
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> RgbImage {
        let data = (0..8 * 8 * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        RgbImage::new(8, 8, data).unwrap()
    }

    #[test]
    fn identity_leaves_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let im = sample();
        assert_eq!(apply_condition(&im, &ConditionSpec::identity(), &mut rng), im);
    }

    #[test]
    fn full_fog_is_flat_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ConditionSpec { hue_shift: 70.0, gain: 1.3, fog: 1.0, noise: 0.0 };
        let out = apply_condition(&sample(), &spec, &mut rng);
        assert!(out.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hsv_round_trip() {
        for p in sample().data.chunks(3) {
            let (h, s, v) = rgb_to_hsv([p[0], p[1], p[2]]);
            let q = hsv_to_rgb(h, s, v);
            for (a, b) in p.iter().zip(q) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn full_turn_of_hue_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ConditionSpec { hue_shift: 360.0, ..ConditionSpec::identity() };
        let im = sample();
        let out = apply_condition(&im, &spec, &mut rng);
        for (a, b) in im.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
