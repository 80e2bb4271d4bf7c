//! Parameter binding and the handful of layer blocks the networks share.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::init::glorot;
use crate::tensor::tape::{BatchStats, BnMode};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are collected for update.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Binds named parameters from a store onto a tape, once per name, so a
/// network applied twice on the same tape shares (and accumulates into)
/// the same leaves.
pub struct Binder<'s, T> {
    params: &'s ParamStore<T>,
    buffers: &'s ParamStore<T>,
    trainable: bool,
    pub mode: Mode,
    /// When false, training-mode batch statistics are not collected.
    pub record_stats: bool,
    bound: BTreeMap<String, Var>,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'s, T: Real> Binder<'s, T> {
    pub fn new(params: &'s ParamStore<T>, buffers: &'s ParamStore<T>, mode: Mode, trainable: bool) -> Self {
        Self {
            params,
            buffers,
            trainable,
            mode,
            record_stats: true,
            bound: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn param(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable { tape.param(t) } else { tape.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn batch_norm(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(tape, &format!("{prefix}.gamma"))?;
        let beta = self.param(tape, &format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Train)?;
                if self.record_stats {
                    if let Some(s) = stats {
                        self.stats.push((prefix.to_string(), s));
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffers.get(&format!("{prefix}.running_mean"))?.data();
                let var = self.buffers.get(&format!("{prefix}.running_var"))?.data();
                Ok(tape.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })?.0)
            }
        }
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn grads(&self, tape: &Tape<T>) -> ParamStore<T> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn take_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }
}

/// Exponential moving update of running batch-norm statistics.
pub fn update_running<T: Real>(buffers: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    for (prefix, s) in stats {
        for (suffix, vals) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let buf = buffers.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(vals.iter()) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
    Ok(())
}

pub fn leaky<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.leaky_relu(x, T::lit(LEAKY_SLOPE))
}

// -------------------------------------------------------------------------
// Initialisation

pub fn init_conv<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cout: usize, cin: usize, k: usize) {
    store.insert(format!("{name}.w"), glorot(rng, &[cout, cin, k, k], cin * k * k, cout * k * k));
}

pub fn init_deconv<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{name}.w"), glorot(rng, &[cin, cout, k, k], cin * k * k, cout * k * k));
}

pub fn init_dense<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, nin: usize, nout: usize) {
    store.insert(format!("{name}.w"), glorot(rng, &[nin, nout], nin, nout));
}

pub fn init_bias<T: Real>(store: &mut ParamStore<T>, name: &str, n: usize) {
    store.insert(format!("{name}.b"), Tensor::zeros(&[n]));
}

pub fn init_bn<T: Real>(store: &mut ParamStore<T>, buffers: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
    buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], T::one()));
}
