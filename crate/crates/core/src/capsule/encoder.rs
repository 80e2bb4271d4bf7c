//! The capsule encoder network: three conv blocks, a primary-capsule conv,
//! and routed residual aggregation into K output capsules.

use rand::{Rng, SeedableRng};

use super::features::PlaceFeature;
use super::routing::ResidualNorm;
use crate::error::{Error, Result};
use crate::nn::{init_bn, init_conv, leaky, Binder, Mode};
use crate::scalar::Real;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub conv_widths: [usize; 3],
    pub conv_kernel: usize,
    /// Capsule types per spatial position of the primary layer.
    pub primary_types: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub capsules: usize,
    pub feature_dim: usize,
    pub cond_dim: usize,
    pub routing_iters: usize,
    pub residual_norm: ResidualNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            conv_widths: [16, 32, 64],
            conv_kernel: 5,
            primary_types: 4,
            primary_dim: 8,
            primary_kernel: 9,
            capsules: 16,
            feature_dim: 16,
            cond_dim: 3,
            routing_iters: 3,
            residual_norm: ResidualNorm::Clusters,
        }
    }
}

const STRIDES: [usize; 3] = [2, 2, 1];
const PRIMARY_STRIDE: usize = 2;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.conv_widths.contains(&0) || self.primary_types == 0 || self.primary_dim == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.capsules == 0 || self.feature_dim < 2 {
            return bad(format!("need K >= 1 and D_feature >= 2, got {} and {}", self.capsules, self.feature_dim));
        }
        if self.cond_dim == 0 || self.cond_dim >= self.feature_dim {
            return bad(format!("D_C = {} must lie in [1, {})", self.cond_dim, self.feature_dim));
        }
        if self.routing_iters == 0 {
            return bad("routing iterations must be at least 1".into());
        }
        if self.conv_kernel.is_multiple_of(2) || self.primary_kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd".into());
        }
        Ok(())
    }

    /// Side of the primary-capsule grid.
    pub fn grid(&self) -> usize {
        let mut s = self.image_size;
        for st in STRIDES.iter().chain([&PRIMARY_STRIDE]) {
            s = s.div_ceil(*st);
        }
        s
    }

    /// Number of local features N routed into the output capsules.
    pub fn n_local(&self) -> usize {
        self.primary_types * self.grid() * self.grid()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [IMAGE_CHANNELS, self.image_size, self.image_size]
    }

    pub fn flat_dim(&self) -> usize {
        self.capsules * self.feature_dim
    }
}

pub fn init_encoder<T: Real, R: Rng>(cfg: &EncoderConfig, rng: &mut R, params: &mut ParamStore<T>, buffers: &mut ParamStore<T>) {
    let mut cin = IMAGE_CHANNELS;
    for (i, &c) in cfg.conv_widths.iter().enumerate() {
        init_conv(params, rng, &format!("enc.conv{}", i + 1), c, cin, cfg.conv_kernel);
        init_bn(params, buffers, &format!("enc.bn{}", i + 1), c);
        cin = c;
    }
    let pc = cfg.primary_types * cfg.primary_dim;
    init_conv(params, rng, "enc.pcaps", pc, cin, cfg.primary_kernel);
    init_bn(params, buffers, "enc.pcaps_bn", pc);
    let (n, k, df, dp) = (cfg.n_local(), cfg.capsules, cfg.feature_dim, cfg.primary_dim);
    params.insert("enc.caps.w", crate::tensor::init::glorot(rng, &[n, k, df, dp], dp, df));
    // the bias enters every capsule N/K times over; zero keeps the image-dependent part dominant
    params.insert("enc.caps.b", Tensor::zeros(&[k, df]));
}

/// Records the encoder on `tape`: `x [B, 3, H, W]` → capsules `[B, K, D]`.
pub fn encoder_forward<T: Real>(tape: &mut Tape<T>, bind: &mut Binder<'_, T>, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let img = cfg.image_shape();
    if shape.len() != 4 || shape[1..] != img {
        return Err(Error::shape("encode", &shape, &img));
    }
    let batch = shape[0];
    let mut h = x;
    for (i, &stride) in STRIDES.iter().enumerate() {
        let w = bind.param(tape, &format!("enc.conv{}.w", i + 1))?;
        h = tape.conv2d(h, w, None, stride)?;
        h = bind.batch_norm(tape, h, &format!("enc.bn{}", i + 1))?;
        h = leaky(tape, h);
    }
    let w = bind.param(tape, "enc.pcaps.w")?;
    h = tape.conv2d(h, w, None, PRIMARY_STRIDE)?;
    h = bind.batch_norm(tape, h, "enc.pcaps_bn")?;

    // [B, types*Dp, g, g] -> [B, types, g, g, Dp] -> [B, N, Dp]
    let (g, types, dp) = (cfg.grid(), cfg.primary_types, cfg.primary_dim);
    h = tape.reshape(h, &[batch, types, dp, g, g])?;
    h = tape.permute(h, &[0, 1, 3, 4, 2])?;
    h = tape.reshape(h, &[batch, cfg.n_local(), dp])?;
    let primary = tape.squash(h);

    let w = bind.param(tape, "enc.caps.w")?;
    let b = bind.param(tape, "enc.caps.b")?;
    let pred = tape.caps_predict(primary, w, b)?;
    let divisor = T::from_usize(cfg.residual_norm.divisor(cfg.n_local(), cfg.capsules)).unwrap();
    let resid = tape.center(pred, 2, divisor)?;
    route(tape, resid, cfg.routing_iters)
}

/// Unrolled dynamic routing over residuals `r [B, N, K, D]`.
pub fn route<T: Real>(tape: &mut Tape<T>, r: Var, iters: usize) -> Result<Var> {
    let rs = tape.shape(r).to_vec();
    if rs.len() != 4 {
        return Err(Error::invalid("route", format!("expected [B, N, K, D], got {rs:?}")));
    }
    let mut logits = tape.constant(Tensor::zeros(&rs[..3]));
    let mut v = None;
    for it in 0..iters {
        let q = tape.softmax(logits, 2)?;
        let s = tape.route_sum(q, r)?;
        let out = tape.squash(s);
        if it + 1 < iters {
            let a = tape.route_agree(r, out)?;
            logits = tape.add(logits, a)?;
        }
        v = Some(out);
    }
    v.ok_or_else(|| Error::invalid("route", "iterations must be at least 1"))
}

/// Encoder parameters with their batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct CapsuleEncoder<T> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

/// Images per tape during inference.
const ENCODE_CHUNK: usize = 32;

impl<T: Real> CapsuleEncoder<T> {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        init_encoder(&config, rng, &mut params, &mut buffers);
        Ok(Self { config, params, buffers })
    }

    /// Rebuilds an encoder from stored `enc.*` parameters and buffers.
    pub fn from_stores(config: EncoderConfig, params: &ParamStore<T>, buffers: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let enc = Self {
            params: params.filter_prefix("enc."),
            buffers: buffers.filter_prefix("enc."),
            config,
        };
        let mut want_p = ParamStore::<T>::new();
        let mut want_b = ParamStore::<T>::new();
        init_encoder(&enc.config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0), &mut want_p, &mut want_b);
        for (store, want) in [(&enc.params, &want_p), (&enc.buffers, &want_b)] {
            for (name, t) in want.iter() {
                let got = store.get(name).map_err(|_| Error::Config(format!("checkpoint lacks {name}")))?;
                if got.shape() != t.shape() {
                    return Err(Error::Config(format!(
                        "{name}: checkpoint shape {:?} does not match config shape {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
            }
        }
        Ok(enc)
    }

    /// Inference-mode encoding of `[B, 3, H, W]` images in [0, 1].
    pub fn encode_batch(&self, images: &Tensor<T>) -> Result<Vec<PlaceFeature<T>>> {
        let img = self.config.image_shape();
        if images.rank() != 4 || images.shape()[1..] != img {
            return Err(Error::shape("encode", images.shape(), &img));
        }
        let per = img.iter().product::<usize>();
        let mut out = Vec::with_capacity(images.shape()[0]);
        for chunk in images.data().chunks(per * ENCODE_CHUNK) {
            let b = chunk.len() / per;
            let mut tape = Tape::new();
            let mut bind = Binder::new(&self.params, &self.buffers, Mode::Eval, false);
            let x = tape.constant(Tensor::new(vec![b, img[0], img[1], img[2]], chunk.to_vec())?);
            let v = encoder_forward(&mut tape, &mut bind, &self.config, x)?;
            let per_out = self.config.flat_dim();
            for row in tape.value(v).data().chunks(per_out) {
                let t = Tensor::new(vec![self.config.capsules, self.config.feature_dim], row.to_vec())?;
                out.push(PlaceFeature::new(t)?);
            }
        }
        Ok(out)
    }

    /// Encodes a single `[3, H, W]` image.
    pub fn encode(&self, image: &Tensor<T>) -> Result<PlaceFeature<T>> {
        let img = self.config.image_shape();
        if image.shape() != img {
            return Err(Error::shape("encode", image.shape(), &img));
        }
        let batch = image.clone().reshape(&[1, img[0], img[1], img[2]])?;
        Ok(self.encode_batch(&batch)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::capsule::routing::{dynamic_routing, CapsuleParams, LocalFeatureSet};

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            conv_widths: [4, 4, 6],
            primary_types: 2,
            primary_dim: 4,
            primary_kernel: 3,
            capsules: 5,
            feature_dim: 6,
            cond_dim: 2,
            ..EncoderConfig::default()
        }
    }

    fn images(b: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 3, size, size], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_grid_and_local_count() {
        let c = EncoderConfig::default();
        assert_eq!(c.grid(), 8);
        assert_eq!(c.n_local(), 256);
        c.validate().unwrap();
        assert!(EncoderConfig { cond_dim: 16, ..c.clone() }.validate().is_err());
        assert!(EncoderConfig { routing_iters: 0, ..c }.validate().is_err());
    }

    #[test]
    fn default_shape_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig { capsules: 64, ..EncoderConfig::default() };
        let enc = CapsuleEncoder::<f32>::new(cfg, &mut rng).unwrap();
        let img = images(1, 64, 1).cast::<f32>().reshape(&[3, 64, 64]).unwrap();
        let f = enc.encode(&img).unwrap();
        assert_eq!(f.values().shape(), &[64, 16]);
        assert!(f.norms().iter().all(|&n| n < 1.0));
        let again = enc.encode(&img).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = CapsuleEncoder::<f64>::new(small(), &mut rng).unwrap();
        assert!(enc.encode(&Tensor::zeros(&[3, 15, 16])).is_err());
        assert!(enc.encode_batch(&Tensor::zeros(&[2, 1, 16, 16])).is_err());
    }

    #[test]
    fn batched_encoding_is_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = CapsuleEncoder::<f64>::new(small(), &mut rng).unwrap();
        let batch = images(3, 16, 9);
        let all = enc.encode_batch(&batch).unwrap();
        for (i, f) in all.iter().enumerate() {
            let one = Tensor::new(vec![3, 16, 16], batch.data()[i * 768..(i + 1) * 768].to_vec()).unwrap();
            let g = enc.encode(&one).unwrap();
            for (a, b) in f.values().data().iter().zip(g.values().data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_routing_matches_reference() {
        // Drive the batched routing with the same residual inputs as the
        // per-image reference implementation.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, k, df, dp) = (6, 4, 3, 5);
        let p = CapsuleParams::new(
            Tensor::from_fn(&[n, k, df, dp], |_| rng.random_range(-0.8..0.8)),
            Tensor::from_fn(&[k, df], |_| rng.random_range(-0.8..0.8)),
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dp).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for norm in [ResidualNorm::Clusters, ResidualNorm::LocalFeatures] {
            let set = LocalFeatureSet::new(xs.clone()).unwrap();
            let want = dynamic_routing(&set, &p, 4, norm).unwrap().capsules;

            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, n, dp], xs.concat()).unwrap());
            let w = tape.constant(p.weights.clone());
            let b = tape.constant(p.bias.clone());
            let pred = tape.caps_predict(x, w, b).unwrap();
            let r = tape.center(pred, 2, norm.divisor(n, k) as f64).unwrap();
            let v = route(&mut tape, r, 4).unwrap();
            for (a, b) in tape.value(v).data().iter().zip(want.concat()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_forward_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = CapsuleEncoder::<f64>::new(small(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut bind = Binder::new(&enc.params, &enc.buffers, Mode::Train, true);
        let x = tape.constant(images(4, 16, 2));
        let v = encoder_forward(&mut tape, &mut bind, &enc.config, x).unwrap();
        let loss = tape.sum(v);
        tape.backward(loss).unwrap();
        let grads = bind.grads(&tape);
        assert_eq!(grads.len(), enc.params.len());
        assert!(grads.iter().all(|(_, g)| g.is_finite()));
        assert_eq!(bind.take_stats().len(), 4);
    }

    #[test]
    fn from_stores_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = CapsuleEncoder::<f64>::new(small(), &mut rng).unwrap();
        assert!(CapsuleEncoder::from_stores(small(), &enc.params, &enc.buffers).is_ok());
        let other = EncoderConfig { capsules: 7, ..small() };
        assert!(CapsuleEncoder::from_stores(other, &enc.params, &enc.buffers).is_err());
    }
}
