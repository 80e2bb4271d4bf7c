//! File-level stages of the pipeline. Each stage reads its inputs from
//! disk, writes its outputs under an output directory together with the
//! resolved configuration, and returns the paths it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::baseline::{kmeans_fit, local_descriptors, sad_descriptor, vlad_encode, write_codebook, Codebook};
use crate::capsule::{read_features, write_features, CapsuleEncoder, FeatureSet};
use crate::config::RunConfig;
use crate::dataset::{self, frame_batch, generate, manifest_path, split, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::eval::{compare_report, pr_curve, Run};
use crate::matcher::{match_sequences, read_match_scores, write_matches};
use crate::separation::train::{checkpoint_path, diagnose, load_state, Trainer};

pub const CONFIG_ECHO: &str = "config.resolved";
pub const TRAIN_FILE: &str = "train.mdfld";
pub const TEST_FILE: &str = "test.mdfld";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Caps,
    Vlad,
    Sad,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Caps => "caps",
            FeatureKind::Vlad => "vlad",
            FeatureKind::Sad => "sad",
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caps" => Ok(FeatureKind::Caps),
            "vlad" => Ok(FeatureKind::Vlad),
            "sad" => Ok(FeatureKind::Sad),
            _ => Err(Error::Config(format!("unknown feature kind {s:?} (caps|vlad|sad)"))),
        }
    }
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CONFIG_ECHO);
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Generates the dataset and writes its train and test splits.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = generate(cfg.seed, cfg.frames, &cfg.conditions, &cfg.world)?;
    let (train, test) = split(&ds, cfg.test_fraction)?;
    let mut written = vec![echo_config(cfg, out)?];
    for (name, part) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        let path = out.join(name);
        dataset::save(part, &path)?;
        written.push(manifest_path(&path));
        written.push(path);
    }
    Ok(written)
}

fn load_splits(data: &Path) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
    Ok((dataset::load(&data.join(TRAIN_FILE))?, dataset::load(&data.join(TEST_FILE))?))
}

/// Trains from scratch, or continues from `resume`, writing checkpoints
/// and the loss log into `out`.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<Vec<PathBuf>> {
    let (train, test) = load_splits(data)?;
    let mut written = vec![echo_config(cfg, out)?];
    let mut trainer = match resume {
        Some(p) => Trainer::<f32>::resume(cfg.model.clone(), cfg.train_config(), p)?,
        None => Trainer::<f32>::new(cfg.model.clone(), cfg.train_config())?,
    };
    let result = trainer.run(&train, &test, out);
    written.extend(list_checkpoints(out)?);
    written.push(out.join("train_log.csv"));
    result.map(|_| written)
}

/// Checkpoint files in `dir`, by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("ckpt_") && name.ends_with(".mdflw")
        })
        .collect();
    found.sort();
    Ok(found)
}

/// Inference encoder from a training checkpoint.
pub fn load_encoder(cfg: &RunConfig, checkpoint: &Path) -> Result<CapsuleEncoder<f32>> {
    let state = load_state::<f32>(checkpoint)?;
    CapsuleEncoder::from_stores(cfg.model.encoder.clone(), &state.params, &state.buffers)
}

/// VLAD vocabulary from the local descriptors of every frame of `train`.
pub fn fit_codebook(cfg: &RunConfig, train: &TrajectoryDataset) -> Result<Codebook<f32>> {
    let points: Vec<Vec<f32>> = train
        .frames
        .par_iter()
        .map(|f| local_descriptors(&f.image()))
        .collect::<Result<Vec<_>>>()?
        .concat();
    Ok(kmeans_fit(&points, cfg.vlad.clusters, cfg.seed, cfg.vlad.kmeans_iters)?.codebook)
}

/// Feature sets of every condition sequence of `ds`, in condition order.
/// Capsule features need `encoder`, VLAD features `codebook`.
pub fn encode_dataset(
    cfg: &RunConfig,
    kind: FeatureKind,
    ds: &TrajectoryDataset,
    encoder: Option<&CapsuleEncoder<f32>>,
    codebook: Option<&Codebook<f32>>,
) -> Result<Vec<FeatureSet>> {
    (0..ds.conditions)
        .map(|c| {
            let seq = ds.sequence(c);
            if seq.is_empty() {
                return Err(Error::Data(format!("condition {c} has no frames")));
            }
            match kind {
                FeatureKind::Caps => {
                    let enc = encoder.ok_or_else(|| Error::Config("caps features need --checkpoint".into()))?;
                    let x = frame_batch::<f32>(&seq, enc.config.image_size)?;
                    FeatureSet::from_places(&enc.encode_batch(&x)?, enc.config.cond_dim)
                }
                FeatureKind::Vlad => {
                    let cb = codebook.ok_or_else(|| Error::Config("vlad features need a codebook".into()))?;
                    let rows = seq
                        .par_iter()
                        .map(|f| vlad_encode(&local_descriptors(&f.image())?, cb, cfg.vlad.assignment()))
                        .collect::<Result<Vec<_>>>()?;
                    FeatureSet::plain(rows)
                }
                FeatureKind::Sad => {
                    let rows = seq.par_iter().map(|f| sad_descriptor(&f.image(), &cfg.sad)).collect::<Result<Vec<_>>>()?;
                    FeatureSet::plain(rows)
                }
            }
        })
        .collect()
}

pub fn feature_path(out: &Path, kind: FeatureKind, condition: usize) -> PathBuf {
    out.join(format!("{}_c{condition}.mdflf", kind.name()))
}

/// Encodes the test split of `data`, one feature file per condition.
pub fn encode(cfg: &RunConfig, kind: FeatureKind, data: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    let (train, test) = load_splits(data)?;
    let encoder = match (kind, checkpoint) {
        (FeatureKind::Caps, Some(p)) => Some(load_encoder(cfg, p)?),
        (FeatureKind::Caps, None) => return Err(Error::Config("caps features need --checkpoint".into())),
        _ => None,
    };
    let codebook = match kind {
        FeatureKind::Vlad => Some(fit_codebook(cfg, &train)?),
        _ => None,
    };
    let sets = encode_dataset(cfg, kind, &test, encoder.as_ref(), codebook.as_ref())?;
    let mut written = vec![echo_config(cfg, out)?];
    if let Some(cb) = &codebook {
        let path = out.join("vlad_codebook.mdflc");
        write_codebook(&path, cb)?;
        written.push(path);
    }
    for (c, set) in sets.iter().enumerate() {
        let path = feature_path(out, kind, c);
        write_features(&path, set)?;
        written.push(path);
    }
    Ok(written)
}

/// `<method>_<query tag>-<ref tag>` from feature files named `<method>_<tag>.mdflf`.
pub fn run_name(query: &Path, reference: &Path) -> String {
    let stem = |p: &Path| p.file_stem().and_then(|s| s.to_str()).unwrap_or("features").to_string();
    let (q, r) = (stem(query), stem(reference));
    let (method, q_tag) = q.split_once('_').unwrap_or((&q, "q"));
    let r_tag = r.split_once('_').map_or(r.as_str(), |x| x.1);
    format!("{method}_{q_tag}-{r_tag}")
}

/// Matches the geometric block of `query` against `reference`; the ground
/// truth is the same frame position.
pub fn match_files(cfg: &RunConfig, query: &Path, reference: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (q, r) = (read_features(query)?, read_features(reference)?);
    if (q.k, q.d, q.d_c) != (r.k, r.d, r.d_c) {
        return Err(Error::Data(format!(
            "feature layouts differ: {}x{} (D_C {}) vs {}x{} (D_C {})",
            q.k, q.d, q.d_c, r.k, r.d, r.d_c
        )));
    }
    let results = match_sequences(&q.geometric(), &r.geometric(), &cfg.matcher)?;
    let mut written = vec![echo_config(cfg, out)?];
    let path = out.join(format!("{}.csv", run_name(query, reference)));
    write_matches(&path, &results, 0, cfg.matcher.tolerance)?;
    written.push(path);
    Ok(written)
}

/// PR curves and AUC report over match files named `<method>_<pair>.csv`.
pub fn eval(cfg: &RunConfig, matches: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if matches.is_empty() {
        return Err(Error::Config("eval needs at least one match file".into()));
    }
    let mut runs = Vec::new();
    for p in matches {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (method, pair) = name.split_once('_').unwrap_or((&name, "all"));
        let (scores, correct): (Vec<f64>, Vec<bool>) = read_match_scores(p)?.into_iter().unzip();
        runs.push(Run { method: method.to_string(), pair: pair.to_string(), curve: pr_curve(&scores, &correct)?, name });
    }
    let config: BTreeMap<String, String> = cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let mut written = vec![echo_config(cfg, out)?];
    written.extend(compare_report(&runs, out, &config)?);
    Ok(written)
}

/// Held-out condition loss and MI for each checkpoint (a file, or every
/// checkpoint in a directory), written as `diag.csv`.
pub fn diag(cfg: &RunConfig, data: &Path, checkpoints: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (_, test) = load_splits(data)?;
    let files = if checkpoints.is_dir() { list_checkpoints(checkpoints)? } else { vec![checkpoints.to_path_buf()] };
    if files.is_empty() {
        return Err(Error::Data(format!("no checkpoints in {}", checkpoints.display())));
    }
    let mut rows = Vec::new();
    for f in &files {
        let state = load_state::<f32>(f)?;
        let enc = CapsuleEncoder::from_stores(cfg.model.encoder.clone(), &state.params, &state.buffers)?;
        rows.push((state.step, diagnose(&enc, &test, cfg.train.mi_bins)?));
    }
    rows.sort_by_key(|r| r.0);
    let mut written = vec![echo_config(cfg, out)?];
    let path = out.join("diag.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["step", "heldout_cond", "mi"]).map_err(|e| Error::Data(e.to_string()))?;
    for (step, d) in rows {
        w.serialize((step, d.heldout_cond, d.mi)).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Path of the final checkpoint of a training run in `dir`.
pub fn final_checkpoint(cfg: &RunConfig, dir: &Path) -> PathBuf {
    checkpoint_path(dir, cfg.train.steps)
}
