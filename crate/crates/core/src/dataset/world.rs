use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::image::RgbImage;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    /// Camera advance per frame, in pixels.
    pub step: usize,
    /// Mean number of shapes per 100 pixels of path.
    pub density: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            step: 4,
            density: 7.0,
            min_size: 5.0,
            max_size: 26.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Rect { half_w: f64, half_h: f64 },
    Circle { r: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: Kind,
    cx: f64,
    cy: f64,
    color: [f32; 3],
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            Kind::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            Kind::Circle { r } => dx * dx + dy * dy <= r * r,
        }
    }
}

/// The rendered strip every frame is cropped from.
#[derive(Clone, Debug)]
pub struct World {
    width: usize,
    step: usize,
    canvas: Vec<f32>,
}

impl World {
    pub fn generate(seed: u64, n_frames: usize, cfg: &WorldConfig) -> Result<Self> {
        if cfg.step == 0 || cfg.density <= 0.0 || !(cfg.min_size > 0.0 && cfg.min_size <= cfg.max_size) {
            return Err(Error::Config(format!("invalid world config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = (n_frames - 1) * cfg.step + IMAGE_SIZE;
        let count = ((width as f64 / 100.0) * cfg.density).ceil() as usize;
        let shapes: Vec<Shape> = (0..count)
            .map(|_| {
                let size = rng.random_range(cfg.min_size..=cfg.max_size);
                let kind = if rng.random_bool(0.5) {
                    Kind::Rect {
                        half_w: size * rng.random_range(0.3..1.0),
                        half_h: size * rng.random_range(0.3..1.0),
                    }
                } else {
                    Kind::Circle { r: size * 0.6 }
                };
                Shape {
                    kind,
                    cx: rng.random_range(0.0..width as f64),
                    cy: rng.random_range(0.0..IMAGE_SIZE as f64),
                    color: palette(&mut rng),
                }
            })
            .collect();

        let h = IMAGE_SIZE;
        let mut canvas = vec![0.0f32; width * h * 3];
        for y in 0..h {
            // sky above the horizon, ground below
            let t = y as f32 / (h - 1) as f32;
            let bg = if y < h / 2 {
                [0.55 + 0.2 * t, 0.65 + 0.2 * t, 0.9]
            } else {
                [0.35 - 0.1 * t, 0.3 - 0.05 * t, 0.2]
            };
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let c = shapes.iter().rev().find(|s| s.covers(px, py)).map_or(bg, |s| s.color);
                canvas[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&c);
            }
        }
        Ok(Self {
            width,
            step: cfg.step,
            canvas,
        })
    }

    pub fn frames(&self) -> usize {
        (self.width - IMAGE_SIZE) / self.step + 1
    }

    /// Condition-free render of frame `t`.
    pub fn render(&self, t: usize) -> RgbImage {
        let x0 = t * self.step;
        let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
        for y in 0..IMAGE_SIZE {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.canvas[row..row + IMAGE_SIZE * 3]);
        }
        RgbImage::new(IMAGE_SIZE, IMAGE_SIZE, data).expect("fixed size")
    }
}

/// Saturated colours: random hue, saturation in [0.5, 1], value in [0.35, 1].
fn palette(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let h = rng.random_range(0.0..360.0f32);
    let s = rng.random_range(0.5..1.0f32);
    let v = rng.random_range(0.35..1.0f32);
    super::condition::hsv_to_rgb(h, s, v)
}
