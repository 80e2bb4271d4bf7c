//! Non-learned comparison descriptors: VLAD over a k-means codebook, and
//! patch-normalised downsampled images compared by mean absolute difference.

pub mod kmeans;
pub mod sad;
pub mod vlad;

pub use kmeans::{kmeans_fit, read_codebook, write_codebook, Codebook};
pub use sad::{sad_descriptor, sad_distance, SadConfig};
pub use vlad::{local_descriptors, vlad_encode, Assignment};
