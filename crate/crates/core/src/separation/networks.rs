//! Decoder (features to image) and discriminator (image to real/fake logit).

use rand::Rng;

use crate::capsule::encoder::{init_encoder, EncoderConfig, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{init_bias, init_bn, init_conv, init_deconv, init_dense, leaky, Binder, Mode};
use crate::scalar::Real;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

const KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub fc_widths: [usize; 2],
    /// Channels of the smallest feature map, `image_size / 16` on a side.
    pub base_channels: usize,
    pub deconv_widths: [usize; 3],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            fc_widths: [128, 256],
            base_channels: 64,
            deconv_widths: [32, 16, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub conv_widths: [usize; 4],
    pub fc_widths: [usize; 2],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            conv_widths: [8, 16, 32, 64],
            fc_widths: [64, 128],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !self.encoder.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!("image size {} must be a multiple of 16", self.encoder.image_size)));
        }
        let widths = self.decoder.fc_widths.iter().chain(&self.decoder.deconv_widths).chain([&self.decoder.base_channels]);
        if widths.chain(&self.discriminator.conv_widths).chain(&self.discriminator.fc_widths).any(|&w| w == 0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    fn base_side(&self) -> usize {
        self.encoder.image_size / 16
    }

    /// Initial parameters and batch-norm buffers for all three networks.
    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> Result<(ParamStore<T>, ParamStore<T>)> {
        self.validate()?;
        let mut p = ParamStore::new();
        let mut b = ParamStore::new();
        init_encoder(&self.encoder, rng, &mut p, &mut b);
        init_decoder(self, rng, &mut p, &mut b);
        init_discriminator(self, rng, &mut p, &mut b);
        Ok((p, b))
    }
}

fn init_decoder<T: Real, R: Rng>(cfg: &ModelConfig, rng: &mut R, p: &mut ParamStore<T>, b: &mut ParamStore<T>) {
    let d = &cfg.decoder;
    let s = cfg.base_side();
    let dims = [cfg.encoder.flat_dim(), d.fc_widths[0], d.fc_widths[1], d.base_channels * s * s];
    for i in 0..3 {
        init_dense(p, rng, &format!("dec.fc{}", i + 1), dims[i], dims[i + 1]);
        init_bn(p, b, &format!("dec.fc{}_bn", i + 1), dims[i + 1]);
    }
    let chans = [d.base_channels, d.deconv_widths[0], d.deconv_widths[1], d.deconv_widths[2], IMAGE_CHANNELS];
    for i in 0..4 {
        init_deconv(p, rng, &format!("dec.deconv{}", i + 1), chans[i], chans[i + 1], KERNEL);
        if i < 3 {
            init_bn(p, b, &format!("dec.deconv{}_bn", i + 1), chans[i + 1]);
        }
    }
    init_bias(p, "dec.deconv4", IMAGE_CHANNELS);
}

fn init_discriminator<T: Real, R: Rng>(cfg: &ModelConfig, rng: &mut R, p: &mut ParamStore<T>, b: &mut ParamStore<T>) {
    let d = &cfg.discriminator;
    let mut cin = IMAGE_CHANNELS;
    for (i, &c) in d.conv_widths.iter().enumerate() {
        init_conv(p, rng, &format!("disc.conv{}", i + 1), c, cin, KERNEL);
        init_bn(p, b, &format!("disc.conv{}_bn", i + 1), c);
        cin = c;
    }
    let s = cfg.base_side();
    let dims = [cin * s * s, d.fc_widths[0], d.fc_widths[1]];
    for i in 0..2 {
        init_dense(p, rng, &format!("disc.fc{}", i + 1), dims[i], dims[i + 1]);
        init_bn(p, b, &format!("disc.fc{}_bn", i + 1), dims[i + 1]);
    }
    init_dense(p, rng, "disc.fc3", dims[2], 1);
    init_bias(p, "disc.fc3", 1);
}

/// `z [B, K*D]` → image `[B, 3, H, W]` in (0, 1).
pub fn decoder_forward<T: Real>(tape: &mut Tape<T>, bind: &mut Binder<'_, T>, cfg: &ModelConfig, z: Var) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    if zs.len() != 2 || zs[1] != cfg.encoder.flat_dim() {
        return Err(Error::shape("decode", &zs, &[zs.first().copied().unwrap_or(0), cfg.encoder.flat_dim()]));
    }
    let batch = zs[0];
    let mut h = z;
    for i in 1..=3 {
        let w = bind.param(tape, &format!("dec.fc{i}.w"))?;
        h = tape.dense(h, w, None)?;
        h = bind.batch_norm(tape, h, &format!("dec.fc{i}_bn"))?;
        h = leaky(tape, h);
    }
    let s = cfg.base_side();
    h = tape.reshape(h, &[batch, cfg.decoder.base_channels, s, s])?;
    for i in 1..=3 {
        let w = bind.param(tape, &format!("dec.deconv{i}.w"))?;
        h = tape.conv_transpose2d(h, w, None, 2)?;
        h = bind.batch_norm(tape, h, &format!("dec.deconv{i}_bn"))?;
        h = leaky(tape, h);
    }
    let w = bind.param(tape, "dec.deconv4.w")?;
    let b = bind.param(tape, "dec.deconv4.b")?;
    h = tape.conv_transpose2d(h, w, Some(b), 2)?;
    Ok(tape.sigmoid(h))
}

/// Image `[B, 3, H, W]` → real/fake logits `[B, 1]`.
pub fn discriminator_forward<T: Real>(tape: &mut Tape<T>, bind: &mut Binder<'_, T>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let img = cfg.encoder.image_shape();
    if shape.len() != 4 || shape[1..] != img {
        return Err(Error::shape("discriminate", &shape, &img));
    }
    let batch = shape[0];
    let mut h = x;
    for i in 1..=4 {
        let w = bind.param(tape, &format!("disc.conv{i}.w"))?;
        h = tape.conv2d(h, w, None, 2)?;
        h = bind.batch_norm(tape, h, &format!("disc.conv{i}_bn"))?;
        h = leaky(tape, h);
    }
    let flat = tape.value(h).len() / batch;
    h = tape.reshape(h, &[batch, flat])?;
    for i in 1..=2 {
        let w = bind.param(tape, &format!("disc.fc{i}.w"))?;
        h = tape.dense(h, w, None)?;
        h = bind.batch_norm(tape, h, &format!("disc.fc{i}_bn"))?;
        h = leaky(tape, h);
    }
    let w = bind.param(tape, "disc.fc3.w")?;
    let b = bind.param(tape, "disc.fc3.b")?;
    tape.dense(h, w, Some(b))
}

/// Inference-mode decoder over stored parameters.
pub struct Decoder<'a, T> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
    pub buffers: &'a ParamStore<T>,
}

impl<T: Real> Decoder<'_, T> {
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut bind = Binder::new(self.params, self.buffers, Mode::Eval, false);
        let zv = tape.constant(z.clone());
        let out = decoder_forward(&mut tape, &mut bind, self.config, zv)?;
        Ok(tape.value(out).clone())
    }
}

/// Inference-mode discriminator over stored parameters.
pub struct Discriminator<'a, T> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
    pub buffers: &'a ParamStore<T>,
}

impl<T: Real> Discriminator<'_, T> {
    /// Probability that each image is real.
    pub fn discriminate(&self, images: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut bind = Binder::new(self.params, self.buffers, Mode::Eval, false);
        let x = tape.constant(images.clone());
        let logit = discriminator_forward(&mut tape, &mut bind, self.config, x)?;
        let p = tape.sigmoid(logit);
        Ok(tape.value(p).data().to_vec())
    }
}
