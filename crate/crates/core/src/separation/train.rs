//! Alternating adversarial training of encoder, decoder and discriminator.
//!
//! Each step first updates the discriminator on a real batch against its
//! detached reconstruction, then updates encoder and decoder on the
//! weighted joint loss with the discriminator frozen.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{loss_joint, ImageLoss, LossComponents, LossWeights};
use super::mi::mutual_information;
use super::networks::{decoder_forward, discriminator_forward, ModelConfig};
use crate::capsule::encoder::{encoder_forward, CapsuleEncoder};
use crate::dataset::{frame_batch, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::nn::{update_running, Binder, Mode};
use crate::scalar::Real;
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::optim::Adam;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub image_loss: ImageLoss,
    /// Steps between checkpoints; the final step is always written.
    pub checkpoint_every: u64,
    pub mi_bins: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            image_loss: ImageLoss::Mse,
            checkpoint_every: 100,
            mi_bins: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch < 2 {
            return Err(Error::Config(format!("batch {} must be at least 2 for batch norm", self.batch)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam beta {b} outside [0, 1)")));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.mi_bins < 2 {
            return Err(Error::Config(format!("mi_bins {} must be at least 2", self.mi_bins)));
        }
        Ok(())
    }
}

/// One training step's losses, rounded to `f32` so checkpoints hold them
/// exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub disc: f64,
    pub gen: f64,
    pub feature: f64,
    pub cond: f64,
    pub image: f64,
    pub joint: f64,
}

const RECORD_WIDTH: usize = 7;

impl LossRecord {
    fn to_row(self) -> [f32; RECORD_WIDTH] {
        [self.step as f32, self.disc as f32, self.gen as f32, self.feature as f32, self.cond as f32, self.image as f32, self.joint as f32]
    }

    fn from_row(r: &[f32]) -> Self {
        Self {
            step: r[0] as u64,
            disc: r[1] as f64,
            gen: r[2] as f64,
            feature: r[3] as f64,
            cond: r[4] as f64,
            image: r[5] as f64,
            joint: r[6] as f64,
        }
    }

    pub fn components(&self) -> LossComponents {
        LossComponents { feature: self.feature, gan: self.gen, cond: self.cond, image: self.image }
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    pub adam_g: AdamMoments<T>,
    pub adam_d: AdamMoments<T>,
    pub step: u64,
    pub seed: u64,
    pub history: Vec<LossRecord>,
    /// Held-out diagnostics taken at checkpoints.
    pub diagnostics: Vec<(u64, Diagnostics)>,
}

/// Adam moments and step count; hyper-parameters live in [`TrainConfig`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

/// Held-out condition loss and `I(mean z_G; condition)` in bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub heldout_cond: f64,
    pub mi: f64,
}

pub struct Trainer<T> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub state: TrainState<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let (params, buffers) = model.init(&mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let state = TrainState {
            params,
            buffers,
            adam_g: AdamMoments::default(),
            adam_d: AdamMoments::default(),
            step: 0,
            seed: config.seed,
            history: Vec::new(),
            diagnostics: Vec::new(),
        };
        Ok(Self { model, config, state })
    }

    /// Continues from a checkpoint. The checkpoint's seed replaces the
    /// configured one so the batch stream continues unchanged.
    pub fn resume(model: ModelConfig, config: TrainConfig, path: &Path) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        let loaded = load_state(path)?;
        check_same_layout(&t.state.params, &loaded.params, path)?;
        check_same_layout(&t.state.buffers, &loaded.buffers, path)?;
        t.config.seed = loaded.seed;
        t.state = loaded;
        Ok(t)
    }

    /// The trained encoder, for inference.
    pub fn encoder(&self) -> Result<CapsuleEncoder<T>> {
        CapsuleEncoder::from_stores(self.model.encoder.clone(), &self.state.params, &self.state.buffers)
    }

    /// Batch indices for `step`, a pure function of (seed, step).
    fn sample(&self, data: &TrajectoryDataset, step: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(step);
        (0..self.config.batch).map(|_| rng.random_range(0..data.len())).collect()
    }

    /// One discriminator and one generator update. On error the state is
    /// left as it was before the call.
    pub fn step(&mut self, data: &TrajectoryDataset) -> Result<LossRecord> {
        if data.conditions > self.model.encoder.cond_dim {
            return Err(Error::Config(format!(
                "{} conditions need cond_dim >= {}, got {}",
                data.conditions, data.conditions, self.model.encoder.cond_dim
            )));
        }
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let idx = self.sample(data, self.state.step);
        let frames: Vec<_> = idx.iter().map(|&i| &data.frames[i]).collect();
        let x = frame_batch::<T>(&frames, self.model.encoder.image_size)?;
        let labels: Vec<usize> = frames.iter().map(|f| f.condition as usize).collect();

        let (d_grads, d_stats, disc) = self.disc_pass(&x)?;
        let mut next = self.state.clone();
        self.apply(&mut next.params, &mut next.adam_d, &d_grads)?;
        update_running(&mut next.buffers, &d_stats)?;

        let (g_grads, g_stats, c) = gen_pass(&self.model, &self.config, &next.params, &next.buffers, &x, &labels)?;
        let joint = loss_joint(&c, &self.config.weights)?;
        self.apply(&mut next.params, &mut next.adam_g, &g_grads)?;
        update_running(&mut next.buffers, &g_stats)?;

        let record = LossRecord {
            step: next.step + 1,
            disc: round32(disc),
            gen: round32(c.gan),
            feature: round32(c.feature),
            cond: round32(c.cond),
            image: round32(c.image),
            joint: round32(joint),
        };
        next.step += 1;
        next.history.push(record);
        self.state = next;
        Ok(record)
    }

    fn disc_pass(&self, x: &Tensor<T>) -> Result<(ParamStore<T>, Vec<(String, crate::tensor::tape::BatchStats<T>)>, f64)> {
        let (p, b) = (&self.state.params, &self.state.buffers);
        let mut tape = Tape::new();
        let mut gen = Binder::new(p, b, Mode::Train, false);
        gen.record_stats = false;
        let xv = tape.constant(x.clone());
        let z = encoder_forward(&mut tape, &mut gen, &self.model.encoder, xv)?;
        let zf = flatten(&mut tape, z)?;
        let fake = decoder_forward(&mut tape, &mut gen, &self.model, zf)?;
        let fake = tape.detach(fake);

        let mut disc = Binder::new(p, b, Mode::Train, true);
        let real_logit = discriminator_forward(&mut tape, &mut disc, &self.model, xv)?;
        disc.record_stats = false;
        let fake_logit = discriminator_forward(&mut tape, &mut disc, &self.model, fake)?;
        let l_real = tape.bce_with_logits(real_logit, T::one());
        let l_fake = tape.bce_with_logits(fake_logit, T::zero());
        let loss = tape.add(l_real, l_fake)?;
        let value = tape.value(loss).item().unwrap().to_f64().unwrap();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("discriminator loss is {value} at step {}", self.state.step + 1)));
        }
        tape.backward(loss)?;
        let grads = disc.grads(&tape);
        check_grads(&grads, self.state.step + 1)?;
        Ok((grads, disc.take_stats(), value))
    }

    fn apply(&self, params: &mut ParamStore<T>, moments: &mut AdamMoments<T>, grads: &ParamStore<T>) -> Result<()> {
        // a zero learning rate is a dry run: moments and parameters stay put
        if self.config.lr == 0.0 {
            return Ok(());
        }
        let mut adam = Adam::new(T::lit(self.config.lr), T::lit(self.config.beta1), T::lit(self.config.beta2))?;
        adam.step = moments.step;
        adam.m = std::mem::take(&mut moments.m);
        adam.v = std::mem::take(&mut moments.v);
        let r = adam.step(params, grads);
        moments.step = adam.step;
        moments.m = adam.m;
        moments.v = adam.v;
        r
    }

    /// Held-out condition loss and MI, both on eval-mode features.
    pub fn diagnose(&self, heldout: &TrajectoryDataset) -> Result<Diagnostics> {
        diagnose(&self.encoder()?, heldout, self.config.mi_bins)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_state(path, &self.state)
    }

    /// Runs until `config.steps`, writing `ckpt_<step>.mdflw` every
    /// `checkpoint_every` steps (and at the start and end) plus
    /// `train_log.csv`. On a numeric failure the checkpoints already on
    /// disk are kept and the error is returned.
    pub fn run(&mut self, train: &TrajectoryDataset, heldout: &TrajectoryDataset, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        if self.state.step == 0 {
            self.checkpoint(heldout, out_dir)?;
        }
        while self.state.step < self.config.steps {
            self.step(train)?;
            let s = self.state.step;
            if s.is_multiple_of(self.config.checkpoint_every) || s == self.config.steps {
                self.checkpoint(heldout, out_dir)?;
            }
        }
        Ok(())
    }

    fn checkpoint(&mut self, heldout: &TrajectoryDataset, out_dir: &Path) -> Result<()> {
        let step = self.state.step;
        if self.state.diagnostics.last().is_none_or(|d| d.0 != step) {
            let d = self.diagnose(heldout)?;
            let d = Diagnostics { heldout_cond: round32(d.heldout_cond), mi: round32(d.mi) };
            self.state.diagnostics.push((step, d));
        }
        self.save(&checkpoint_path(out_dir, step))?;
        write_log(&out_dir.join("train_log.csv"), &self.state)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.mdflw"))
}

fn flatten<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    tape.reshape(z, &[s[0], s[1] * s[2]])
}

fn check_grads<T: Real>(grads: &ParamStore<T>, step: u64) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((name, _)) => Err(Error::Numeric(format!("non-finite gradient for {name} at step {step}"))),
        None => Ok(()),
    }
}

type Stats<T> = Vec<(String, crate::tensor::tape::BatchStats<T>)>;

/// Generator-side forward and backward: gradients for encoder and decoder
/// parameters, their batch statistics, and the loss components.
fn gen_pass<T: Real>(
    model: &ModelConfig,
    config: &TrainConfig,
    params: &ParamStore<T>,
    buffers: &ParamStore<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(ParamStore<T>, Stats<T>, LossComponents)> {
    let enc = &model.encoder;
    let mut tape = Tape::new();
    let mut gen = Binder::new(params, buffers, Mode::Train, true);
    let xv = tape.constant(x.clone());
    let z = encoder_forward(&mut tape, &mut gen, enc, xv)?;

    let z_c = tape.slice_last(z, enc.feature_dim - enc.cond_dim, enc.feature_dim)?;
    let logits = tape.mean_axis(z_c, 1)?;
    let cond = tape.cross_entropy(logits, labels)?;

    let zf = flatten(&mut tape, z)?;
    let reco = decoder_forward(&mut tape, &mut gen, model, zf)?;
    let image = match config.image_loss {
        ImageLoss::Mse => tape.mse(xv, reco)?,
        ImageLoss::L2 => tape.l2_loss(xv, reco)?,
    };

    // the re-encoding shares the encoder but must not move its statistics
    gen.record_stats = false;
    let z_hat = encoder_forward(&mut tape, &mut gen, enc, reco)?;
    let feature = tape.mse(z, z_hat)?;

    let mut disc = Binder::new(params, buffers, Mode::Train, false);
    disc.record_stats = false;
    let logit = discriminator_forward(&mut tape, &mut disc, model, reco)?;
    let gan = tape.bce_with_logits(logit, T::one());

    let w = &config.weights;
    let joint = tape.weighted_sum(&[
        (feature, T::lit(w.feature)),
        (gan, T::lit(w.gan)),
        (cond, T::lit(w.cond)),
        (image, T::lit(w.image)),
    ])?;
    let item = |v: Var| tape.value(v).item().unwrap().to_f64().unwrap();
    let c = LossComponents { feature: item(feature), gan: item(gan), cond: item(cond), image: item(image) };
    loss_joint(&c, w)?;
    tape.backward(joint)?;
    let grads = gen.grads(&tape);
    check_grads(&grads, 0)?;
    Ok((grads, gen.take_stats(), c))
}

/// Held-out diagnostics of an encoder over labelled frames.
pub fn diagnose<T: Real>(encoder: &CapsuleEncoder<T>, heldout: &TrajectoryDataset, bins: usize) -> Result<Diagnostics> {
    let cfg = &encoder.config;
    let frames: Vec<_> = heldout.frames.iter().collect();
    if frames.is_empty() {
        return Err(Error::Data("empty held-out set".into()));
    }
    let labels = heldout.labels();
    let mut cond = 0.0;
    let mut zbar = Vec::with_capacity(frames.len());
    for (chunk, lab) in frames.chunks(64).zip(labels.chunks(64)) {
        let x = frame_batch::<T>(chunk, cfg.image_size)?;
        for (place, &l) in encoder.encode_batch(&x)?.iter().zip(lab) {
            let (zg, zc) = place.split_condition(cfg.cond_dim)?;
            cond += super::losses::loss_cond(&zc, l)?.to_f64().unwrap();
            let g = zg.data();
            zbar.push(g.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / g.len() as f64);
        }
    }
    Ok(Diagnostics {
        heldout_cond: cond / frames.len() as f64,
        mi: mutual_information(&zbar, &labels, bins)?,
    })
}

// -------------------------------------------------------------------------
// Checkpoint layout (one MDFLW001 file): network parameters under their own
// names, `buffer.*`, `adam_g.{m,v}.*`, `adam_d.{m,v}.*`, and `state.*`.
// Integers are split into 16-bit limbs so f32 storage holds them exactly.

fn limbs(v: u64) -> Vec<f32> {
    (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect()
}

fn unlimb(t: &Tensor<f32>) -> u64 {
    t.data().iter().enumerate().map(|(i, &l)| (l as u64) << (16 * i)).sum()
}

pub fn save_state<T: Real>(path: &Path, s: &TrainState<T>) -> Result<()> {
    let mut out = ParamStore::<f32>::new();
    let cast = |t: &Tensor<T>| t.cast::<f32>();
    for (n, t) in s.params.iter() {
        out.insert(n.clone(), cast(t));
    }
    for (n, t) in s.buffers.iter() {
        out.insert(format!("buffer.{n}"), cast(t));
    }
    for (tag, a) in [("adam_g", &s.adam_g), ("adam_d", &s.adam_d)] {
        for (n, t) in a.m.iter() {
            out.insert(format!("{tag}.m.{n}"), cast(t));
        }
        for (n, t) in a.v.iter() {
            out.insert(format!("{tag}.v.{n}"), cast(t));
        }
        out.insert(format!("state.{tag}_step"), Tensor::new(vec![4], limbs(a.step))?);
    }
    out.insert("state.step", Tensor::new(vec![4], limbs(s.step))?);
    out.insert("state.seed", Tensor::new(vec![4], limbs(s.seed))?);
    if !s.history.is_empty() {
        let rows: Vec<f32> = s.history.iter().flat_map(|r| r.to_row()).collect();
        out.insert("state.history", Tensor::new(vec![s.history.len(), RECORD_WIDTH], rows)?);
    }
    if !s.diagnostics.is_empty() {
        let rows: Vec<f32> = s.diagnostics.iter().flat_map(|(k, d)| [*k as f32, d.heldout_cond as f32, d.mi as f32]).collect();
        out.insert("state.diagnostics", Tensor::new(vec![s.diagnostics.len(), 3], rows)?);
    }
    // write then rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("partial");
    write_checkpoint(&tmp, &out)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_state<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let store = read_checkpoint::<f32>(path)?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let scalar = |name: &str| -> Result<u64> {
        let t = store.get(name).map_err(|_| bad(format!("missing {name}")))?;
        if t.len() != 4 {
            return Err(bad(format!("{name} has {} values, want 4", t.len())));
        }
        Ok(unlimb(t))
    };
    let mut s = TrainState {
        params: ParamStore::new(),
        buffers: ParamStore::new(),
        adam_g: AdamMoments { step: scalar("state.adam_g_step")?, ..Default::default() },
        adam_d: AdamMoments { step: scalar("state.adam_d_step")?, ..Default::default() },
        step: scalar("state.step")?,
        seed: scalar("state.seed")?,
        history: Vec::new(),
        diagnostics: Vec::new(),
    };
    for (name, t) in store.iter() {
        let t = t.cast::<T>();
        let (head, rest) = name.split_once('.').unwrap_or((name, ""));
        match head {
            "state" if rest == "history" => {
                if t.rank() != 2 || t.shape()[1] != RECORD_WIDTH {
                    return Err(bad(format!("history shape {:?}", t.shape())));
                }
                let raw = store.get(name)?.data();
                s.history = raw.chunks(RECORD_WIDTH).map(LossRecord::from_row).collect();
            }
            "state" if rest == "diagnostics" => {
                if t.rank() != 2 || t.shape()[1] != 3 {
                    return Err(bad(format!("diagnostics shape {:?}", t.shape())));
                }
                let raw = store.get(name)?.data();
                s.diagnostics = raw
                    .chunks(3)
                    .map(|r| (r[0] as u64, Diagnostics { heldout_cond: r[1] as f64, mi: r[2] as f64 }))
                    .collect();
            }
            "state" => {}
            "buffer" => s.buffers.insert(rest, t),
            "adam_g" | "adam_d" => {
                let a = if head == "adam_g" { &mut s.adam_g } else { &mut s.adam_d };
                match rest.split_once('.') {
                    Some(("m", n)) => a.m.insert(n, t),
                    Some(("v", n)) => a.v.insert(n, t),
                    _ => return Err(bad(format!("unexpected entry {name}"))),
                }
            }
            _ => s.params.insert(name.clone(), t),
        }
    }
    Ok(s)
}

fn check_same_layout<T: Real>(want: &ParamStore<T>, got: &ParamStore<T>, path: &Path) -> Result<()> {
    let shapes = |s: &ParamStore<T>| s.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
    if shapes(want) != shapes(got) {
        return Err(Error::Config(format!("{}: checkpoint does not match the model configuration", path.display())));
    }
    Ok(())
}

/// `step,disc,gen,feature,cond,image,joint,heldout_cond,mi`, one row per
/// step with a loss or diagnostic record; missing values are empty fields.
pub fn write_log<T>(path: &Path, state: &TrainState<T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["step", "disc", "gen", "feature", "cond", "image", "joint", "heldout_cond", "mi"]).map_err(io)?;
    let mut rows: BTreeMap<u64, [String; 8]> = BTreeMap::new();
    for r in &state.history {
        let row = rows.entry(r.step).or_default();
        for (cell, v) in row.iter_mut().zip([r.disc, r.gen, r.feature, r.cond, r.image, r.joint]) {
            *cell = v.to_string();
        }
    }
    for (step, d) in &state.diagnostics {
        let row = rows.entry(*step).or_default();
        row[6] = d.heldout_cond.to_string();
        row[7] = d.mi.to_string();
    }
    for (step, row) in rows {
        w.write_record(std::iter::once(step.to_string()).chain(row)).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}
