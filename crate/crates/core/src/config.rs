//! Run configuration: every tunable of the pipeline as a flat `key = value`
//! text file. Blank lines and `#` comments are ignored; unknown keys are
//! errors. [`RunConfig::to_text`] writes the fully resolved form, which
//! parses back to an equal value.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::baseline::{Assignment, SadConfig};
use crate::capsule::ResidualNorm;
use crate::dataset::{default_conditions, ConditionSpec, WorldConfig};
use crate::error::{Error, Result};
use crate::matcher::{MatchConfig, Metric};
use crate::separation::{ImageLoss, ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct VladConfig {
    pub clusters: usize,
    pub kmeans_iters: usize,
    /// Soft-assignment sharpness; `None` means hard assignment.
    pub soft_beta: Option<f64>,
}

impl Default for VladConfig {
    fn default() -> Self {
        Self { clusters: 16, kmeans_iters: 50, soft_beta: None }
    }
}

impl VladConfig {
    pub fn assignment(&self) -> Assignment {
        self.soft_beta.map_or(Assignment::Hard, |beta| Assignment::Soft { beta })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// The single source of randomness for every stage.
    pub seed: u64,
    pub frames: usize,
    pub conditions: Vec<ConditionSpec>,
    pub test_fraction: f64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vlad: VladConfig,
    pub sad: SadConfig,
    pub matcher: MatchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 600,
            conditions: default_conditions(),
            test_fraction: 0.2,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vlad: VladConfig::default(),
            sad: SadConfig::default(),
            matcher: MatchConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values, got {v:?}")))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_conditions(v: &str) -> Result<Vec<ConditionSpec>> {
    v.split(';')
        .map(|spec| {
            let f: Vec<f64> = spec.split(',').map(|s| parse("data.conditions", s.trim())).collect::<Result<_>>()?;
            match f[..] {
                [hue_shift, gain, fog, noise] => Ok(ConditionSpec { hue_shift, gain, fog, noise }),
                _ => Err(Error::Config(format!("data.conditions: {spec:?} is not hue,gain,fog,noise"))),
            }
        })
        .collect()
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.model.encoder;
        let t = &self.train;
        let m = &self.matcher;
        let conditions = self
            .conditions
            .iter()
            .map(|c| join(&[c.hue_shift, c.gain, c.fog, c.noise]))
            .collect::<Vec<_>>()
            .join(";");
        vec![
            ("seed", self.seed.to_string()),
            ("data.frames", self.frames.to_string()),
            ("data.conditions", conditions),
            ("data.test_fraction", self.test_fraction.to_string()),
            ("world.step", self.world.step.to_string()),
            ("world.density", self.world.density.to_string()),
            ("world.min_size", self.world.min_size.to_string()),
            ("world.max_size", self.world.max_size.to_string()),
            ("encoder.image_size", e.image_size.to_string()),
            ("encoder.conv_widths", join(&e.conv_widths)),
            ("encoder.conv_kernel", e.conv_kernel.to_string()),
            ("encoder.primary_types", e.primary_types.to_string()),
            ("encoder.primary_dim", e.primary_dim.to_string()),
            ("encoder.primary_kernel", e.primary_kernel.to_string()),
            ("encoder.capsules", e.capsules.to_string()),
            ("encoder.feature_dim", e.feature_dim.to_string()),
            ("encoder.cond_dim", e.cond_dim.to_string()),
            ("encoder.routing_iters", e.routing_iters.to_string()),
            (
                "encoder.residual_norm",
                match e.residual_norm {
                    ResidualNorm::Clusters => "clusters",
                    ResidualNorm::LocalFeatures => "local",
                }
                .to_string(),
            ),
            ("decoder.fc_widths", join(&self.model.decoder.fc_widths)),
            ("decoder.base_channels", self.model.decoder.base_channels.to_string()),
            ("decoder.deconv_widths", join(&self.model.decoder.deconv_widths)),
            ("discriminator.conv_widths", join(&self.model.discriminator.conv_widths)),
            ("discriminator.fc_widths", join(&self.model.discriminator.fc_widths)),
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.w_feature", t.weights.feature.to_string()),
            ("train.w_gan", t.weights.gan.to_string()),
            ("train.w_cond", t.weights.cond.to_string()),
            ("train.w_image", t.weights.image.to_string()),
            (
                "train.image_loss",
                match t.image_loss {
                    ImageLoss::Mse => "mse",
                    ImageLoss::L2 => "l2",
                }
                .to_string(),
            ),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.mi_bins", t.mi_bins.to_string()),
            ("vlad.clusters", self.vlad.clusters.to_string()),
            ("vlad.kmeans_iters", self.vlad.kmeans_iters.to_string()),
            ("vlad.soft_beta", self.vlad.soft_beta.unwrap_or(0.0).to_string()),
            ("sad.size", self.sad.size.to_string()),
            ("sad.patch", self.sad.patch.unwrap_or(0).to_string()),
            ("match.seq_len", m.seq_len.to_string()),
            ("match.v_min", m.velocity.min.to_string()),
            ("match.v_max", m.velocity.max.to_string()),
            ("match.v_step", m.velocity.step.to_string()),
            ("match.enhance_window", m.enhance_window.to_string()),
            ("match.exclusion_window", m.exclusion_window.to_string()),
            ("match.ratio", m.ratio.to_string()),
            (
                "match.metric",
                match m.metric {
                    Metric::Sad => "sad",
                    Metric::L2 => "l2",
                }
                .to_string(),
            ),
            ("match.tolerance", m.tolerance.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let e = &mut self.model.encoder;
        let t = &mut self.train;
        let m = &mut self.matcher;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.frames" => self.frames = parse(key, v)?,
            "data.conditions" => self.conditions = parse_conditions(v)?,
            "data.test_fraction" => self.test_fraction = parse(key, v)?,
            "world.step" => self.world.step = parse(key, v)?,
            "world.density" => self.world.density = parse(key, v)?,
            "world.min_size" => self.world.min_size = parse(key, v)?,
            "world.max_size" => self.world.max_size = parse(key, v)?,
            "encoder.image_size" => e.image_size = parse(key, v)?,
            "encoder.conv_widths" => e.conv_widths = parse_array(key, v)?,
            "encoder.conv_kernel" => e.conv_kernel = parse(key, v)?,
            "encoder.primary_types" => e.primary_types = parse(key, v)?,
            "encoder.primary_dim" => e.primary_dim = parse(key, v)?,
            "encoder.primary_kernel" => e.primary_kernel = parse(key, v)?,
            "encoder.capsules" => e.capsules = parse(key, v)?,
            "encoder.feature_dim" => e.feature_dim = parse(key, v)?,
            "encoder.cond_dim" => e.cond_dim = parse(key, v)?,
            "encoder.routing_iters" => e.routing_iters = parse(key, v)?,
            "encoder.residual_norm" => {
                e.residual_norm = match v {
                    "clusters" => ResidualNorm::Clusters,
                    "local" => ResidualNorm::LocalFeatures,
                    _ => return Err(Error::Config(format!("{key}: {v:?} is not clusters|local"))),
                }
            }
            "decoder.fc_widths" => self.model.decoder.fc_widths = parse_array(key, v)?,
            "decoder.base_channels" => self.model.decoder.base_channels = parse(key, v)?,
            "decoder.deconv_widths" => self.model.decoder.deconv_widths = parse_array(key, v)?,
            "discriminator.conv_widths" => self.model.discriminator.conv_widths = parse_array(key, v)?,
            "discriminator.fc_widths" => self.model.discriminator.fc_widths = parse_array(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.w_feature" => t.weights.feature = parse(key, v)?,
            "train.w_gan" => t.weights.gan = parse(key, v)?,
            "train.w_cond" => t.weights.cond = parse(key, v)?,
            "train.w_image" => t.weights.image = parse(key, v)?,
            "train.image_loss" => {
                t.image_loss = match v {
                    "mse" => ImageLoss::Mse,
                    "l2" => ImageLoss::L2,
                    _ => return Err(Error::Config(format!("{key}: {v:?} is not mse|l2"))),
                }
            }
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.mi_bins" => t.mi_bins = parse(key, v)?,
            "vlad.clusters" => self.vlad.clusters = parse(key, v)?,
            "vlad.kmeans_iters" => self.vlad.kmeans_iters = parse(key, v)?,
            "vlad.soft_beta" => {
                let beta: f64 = parse(key, v)?;
                self.vlad.soft_beta = (beta != 0.0).then_some(beta);
            }
            "sad.size" => self.sad.size = parse(key, v)?,
            "sad.patch" => {
                let p: usize = parse(key, v)?;
                self.sad.patch = (p > 0).then_some(p);
            }
            "match.seq_len" => m.seq_len = parse(key, v)?,
            "match.v_min" => m.velocity.min = parse(key, v)?,
            "match.v_max" => m.velocity.max = parse(key, v)?,
            "match.v_step" => m.velocity.step = parse(key, v)?,
            "match.enhance_window" => m.enhance_window = parse(key, v)?,
            "match.exclusion_window" => m.exclusion_window = parse(key, v)?,
            "match.ratio" => m.ratio = parse(key, v)?,
            "match.metric" => m.metric = v.parse()?,
            "match.tolerance" => m.tolerance = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            c.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides, then revalidates.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.len() < 2 {
            return Err(Error::Config(format!("need at least 2 conditions, got {}", self.conditions.len())));
        }
        for c in &self.conditions {
            c.validate()?;
        }
        if self.conditions.len() > self.model.encoder.cond_dim {
            return Err(Error::Config(format!(
                "encoder.cond_dim = {} cannot label {} conditions",
                self.model.encoder.cond_dim,
                self.conditions.len()
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("data.frames must be positive".into()));
        }
        crate::dataset::tail_count(self.frames, self.test_fraction)?;
        self.model.validate()?;
        self.train.validate()?;
        if self.vlad.clusters == 0 || self.vlad.kmeans_iters == 0 || self.vlad.soft_beta.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::Config("vlad.clusters, vlad.kmeans_iters and vlad.soft_beta must be positive".into()));
        }
        if self.sad.size == 0 || self.sad.patch.is_some_and(|p| !self.sad.size.is_multiple_of(p)) {
            return Err(Error::Config(format!("sad.size {} must be a positive multiple of sad.patch", self.sad.size)));
        }
        let m = &self.matcher;
        if m.seq_len == 0 || m.enhance_window == 0 || m.velocity.values().is_empty() || !(m.ratio > 0.0) {
            return Err(Error::Config("matcher parameters out of range".into()));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}
