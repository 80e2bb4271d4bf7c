//! Loss values on plain arrays. The trainer records the same formulas on
//! the tape; tests pin the two together.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImageLoss {
    /// Mean of squared pixel differences.
    #[default]
    Mse,
    /// Batch mean of the per-image Euclidean norm of the difference.
    L2,
}

pub fn loss_image<T: Real>(raw: &Tensor<T>, reco: &Tensor<T>, kind: ImageLoss) -> Result<T> {
    if raw.shape() != reco.shape() {
        return Err(Error::shape("loss_image", raw.shape(), reco.shape()));
    }
    let sq = raw.data().iter().zip(reco.data()).map(|(&a, &b)| (a - b) * (a - b));
    Ok(match kind {
        ImageLoss::Mse => sq.sum::<T>() / T::from_usize(raw.len()).unwrap(),
        ImageLoss::L2 => {
            let batch = if raw.rank() == 4 { raw.shape()[0] } else { 1 };
            let per = raw.len() / batch;
            let d: Vec<T> = sq.collect();
            d.chunks(per).map(|c| c.iter().copied().sum::<T>().sqrt()).sum::<T>() / T::from_usize(batch).unwrap()
        }
    })
}

/// Mean squared difference between a feature and its re-encoding.
pub fn loss_feature<T: Real>(z: &Tensor<T>, z_hat: &Tensor<T>) -> Result<T> {
    loss_image(z, z_hat, ImageLoss::Mse).map_err(|_| Error::shape("loss_feature", z.shape(), z_hat.shape()))
}

/// Cross-entropy of the condition logits, the capsule-mean of `z_c`
/// (`K x D_C`), against `label`.
pub fn loss_cond<T: Real>(z_c: &Tensor<T>, label: usize) -> Result<T> {
    if z_c.rank() != 2 {
        return Err(Error::invalid("loss_cond", format!("expected K x D_C, got {:?}", z_c.shape())));
    }
    let (k, dc) = (z_c.shape()[0], z_c.shape()[1]);
    if label >= dc {
        return Err(Error::invalid("loss_cond", format!("label {label} >= D_C = {dc}")));
    }
    let mut logits = vec![T::zero(); dc];
    for row in z_c.data().chunks(dc) {
        logits.iter_mut().zip(row).for_each(|(l, &v)| *l += v);
    }
    logits.iter_mut().for_each(|l| *l /= T::from_usize(k).unwrap());
    Ok(cross_entropy(&logits, label))
}

pub(crate) fn cross_entropy<T: Real>(logits: &[T], label: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    lse - logits[label]
}

/// `(disc, gen)` with `disc = -mean log d_real - mean log(1 - d_fake)` and
/// the non-saturating `gen = -mean log d_fake`. Inputs are clamped to
/// `[eps, 1 - eps]`.
pub fn loss_gan<T: Real>(d_real: &[T], d_fake: &[T]) -> Result<(T, T)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::invalid("loss_gan", "empty discriminator output"));
    }
    let eps = T::lit(PROB_EPS);
    let clamp = |p: T| p.max(eps).min(T::one() - eps);
    let mean = |xs: &[T], f: &dyn Fn(T) -> T| xs.iter().map(|&p| f(clamp(p))).sum::<T>() / T::from_usize(xs.len()).unwrap();
    let disc = -mean(d_real, &|p| p.ln()) - mean(d_fake, &|p| (T::one() - p).ln());
    let gen = -mean(d_fake, &|p| p.ln());
    Ok((disc, gen))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub feature: f64,
    pub gan: f64,
    pub cond: f64,
    pub image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { feature: 1.0, gan: 1.0, cond: 1.0, image: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.feature, self.gan, self.cond, self.image];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative with one positive: {self:?}")));
        }
        Ok(())
    }
}

/// The generator-side terms of the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub feature: f64,
    pub gan: f64,
    pub cond: f64,
    pub image: f64,
}

pub fn loss_joint(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let terms = [("feature", c.feature), ("gan", c.gan), ("cond", c.cond), ("image", c.image)];
    if let Some((name, v)) = terms.iter().find(|t| !t.1.is_finite()) {
        return Err(Error::Numeric(format!("loss component {name} is {v}")));
    }
    Ok(w.feature * c.feature + w.gan * c.gan + w.cond * c.cond + w.image * c.image)
}
