//! Feature separation: decoder and discriminator networks, the joint loss,
//! the alternating adversarial training loop, and a histogram estimate of
//! how much condition information the geometric block still carries.

pub mod losses;
pub mod mi;
pub mod networks;
pub mod train;

pub use losses::{loss_cond, loss_feature, loss_gan, loss_image, loss_joint, ImageLoss, LossComponents, LossWeights};
pub use mi::{mi_from_counts, mutual_information};
pub use networks::{Decoder, DecoderConfig, Discriminator, DiscriminatorConfig, ModelConfig};
pub use train::{LossRecord, TrainConfig, TrainState, Trainer};
