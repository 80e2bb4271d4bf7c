use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T) -> Result<Self> {
        if !(lr > T::zero()) {
            return Err(Error::invalid("adam", format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: T::lit(1e-8),
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        })
    }

    /// One update of every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name)?;
            if m.shape() != g.shape() {
                return Err(Error::shape("adam", m.shape(), g.shape()));
            }
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
            }
            let v = self.v.get_mut(name)?;
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mh = mi / c1;
                let vh = vi / c2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
