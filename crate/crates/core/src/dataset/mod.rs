//! Synthetic multi-condition trajectories and their on-disk format.
//!
//! A seeded 1-D world of coloured rectangles and circles is rendered once;
//! frame `t` is the 64x64 window at position `t * step`. Each condition then
//! applies a photometric transform to the same geometry.

mod condition;
mod io;
mod world;

pub use condition::{apply_condition, ConditionSpec};
pub use io::{load, manifest_path, save, DATASET_MAGIC};
pub use world::{World, WorldConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{batch_chw, RgbImage};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const FRAME_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub condition: u32,
    pub index: u32,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn image(&self) -> RgbImage {
        RgbImage::from_bytes(IMAGE_SIZE, IMAGE_SIZE, &self.pixels).expect("frame size is fixed")
    }
}

/// Frames stored condition-major: all of condition 0 in frame order, then
/// condition 1, and so on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajectoryDataset {
    pub conditions: usize,
    pub frames: Vec<Frame>,
}

impl TrajectoryDataset {
    pub fn new(conditions: usize, frames: Vec<Frame>) -> Result<Self> {
        if conditions == 0 {
            return Err(Error::Data("dataset needs at least one condition".into()));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.condition as usize >= conditions {
                return Err(Error::Data(format!("record {i}: condition {} >= {conditions}", f.condition)));
            }
            if f.pixels.len() != FRAME_BYTES {
                return Err(Error::Data(format!("record {i}: {} bytes, want {FRAME_BYTES}", f.pixels.len())));
            }
        }
        Ok(Self { conditions, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames of one condition, in stored order.
    pub fn sequence(&self, condition: usize) -> Vec<&Frame> {
        self.frames.iter().filter(|f| f.condition as usize == condition).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.condition as usize).collect()
    }
}

/// Frames as a `[B, 3, size, size]` network batch, resized when `size`
/// differs from the stored resolution.
pub fn frame_batch<T: Real>(frames: &[&Frame], size: usize) -> Result<Tensor<T>> {
    let images: Vec<RgbImage> = frames.iter().map(|f| f.image().resized(size, size)).collect();
    batch_chw(&images.iter().collect::<Vec<_>>())
}

/// Renders `n_frames` positions under every condition. The noise stream of
/// each (condition, frame) is seeded independently of the others.
pub fn generate(seed: u64, n_frames: usize, specs: &[ConditionSpec], world: &WorldConfig) -> Result<TrajectoryDataset> {
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be at least 1".into()));
    }
    if specs.len() < 2 {
        return Err(Error::Config(format!("need at least 2 conditions, got {}", specs.len())));
    }
    for s in specs {
        s.validate()?;
    }
    let w = World::generate(seed, n_frames, world)?;
    let mut frames = Vec::with_capacity(n_frames * specs.len());
    for (c, spec) in specs.iter().enumerate() {
        for t in 0..n_frames {
            let base = w.render(t);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, c, t));
            let img = apply_condition(&base, spec, &mut rng);
            frames.push(Frame {
                condition: c as u32,
                index: t as u32,
                pixels: img.to_bytes(),
            });
        }
    }
    TrajectoryDataset::new(specs.len(), frames)
}

fn noise_seed(seed: u64, condition: usize, frame: usize) -> u64 {
    // splitmix-style mixing so neighbouring (c, t) pairs get unrelated streams
    let mut z = seed ^ ((condition as u64) << 40) ^ (frame as u64);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of trailing frames in the test side: `ceil(n * fraction)`.
pub fn tail_count(n: usize, test_fraction: f64) -> Result<usize> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    // tolerate representation error so n * (m / n) yields exactly m
    let k = (n as f64 * test_fraction - 1e-9).ceil().max(0.0) as usize;
    if k == 0 || k >= n {
        return Err(Error::Config(format!("split of {n} frames at {test_fraction} leaves an empty side")));
    }
    Ok(k)
}

/// Tail split per condition by frame index: the last `ceil(n * fraction)`
/// positions form the test side.
pub fn split(ds: &TrajectoryDataset, test_fraction: f64) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
    let n = ds.frames.iter().map(|f| f.index as usize + 1).max().unwrap_or(0);
    let k = tail_count(n, test_fraction)?;
    let cut = (n - k) as u32;
    let (test, train): (Vec<Frame>, Vec<Frame>) = ds.frames.iter().cloned().partition(|f| f.index >= cut);
    Ok((TrajectoryDataset::new(ds.conditions, train)?, TrajectoryDataset::new(ds.conditions, test)?))
}

/// Three photometric regimes used by the default configuration.
pub fn default_conditions() -> Vec<ConditionSpec> {
    vec![
        ConditionSpec::identity(),
        ConditionSpec { hue_shift: 120.0, gain: 0.75, fog: 0.0, noise: 0.03 },
        ConditionSpec { hue_shift: 240.0, gain: 1.1, fog: 0.35, noise: 0.05 },
    ]
}
