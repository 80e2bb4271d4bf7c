//! Capsule place features: conv stack, primary capsules, and VLAD-style
//! residual aggregation with dynamic routing.

pub mod encoder;
pub mod features;
pub mod routing;

pub use encoder::{CapsuleEncoder, EncoderConfig};
pub use features::{read_features, write_features, FeatureSet, PlaceFeature};
pub use routing::{dynamic_routing, CapsuleParams, LocalFeatureSet, ResidualNorm};
