//! Sequence-based place matching over per-frame descriptors: difference
//! matrix, local contrast enhancement, constant-velocity line search and a
//! distinctiveness ratio test.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    /// Mean absolute difference.
    #[default]
    Sad,
    /// Euclidean distance.
    L2,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sad" => Ok(Metric::Sad),
            "l2" => Ok(Metric::L2),
            _ => Err(Error::Config(format!("unknown metric {s:?} (sad|l2)"))),
        }
    }
}

/// Row-major `queries x references` distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DifferenceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape("difference_matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn difference_matrix(query: &[Vec<f32>], reference: &[Vec<f32>], metric: Metric) -> Result<DifferenceMatrix> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::invalid("difference_matrix", "empty trajectory"));
    }
    let dim = query[0].len();
    if dim == 0 || query.iter().chain(reference).any(|f| f.len() != dim) {
        return Err(Error::invalid("difference_matrix", "feature dimensions disagree"));
    }
    let data: Vec<f64> = query
        .par_iter()
        .flat_map_iter(|q| reference.iter().map(move |r| distance(q, r, metric)))
        .collect();
    DifferenceMatrix::new(query.len(), reference.len(), data)
}

fn distance(a: &[f32], b: &[f32], metric: Metric) -> f64 {
    match metric {
        Metric::Sad => a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64,
        Metric::L2 => a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt(),
    }
}

/// Standardises each entry by the mean and population std of the entries
/// within `window / 2` rows of it in the same column (clipped at the
/// matrix edges). A std below 1e-12 counts as 1.
pub fn contrast_enhance(d: &DifferenceMatrix, window: usize) -> Result<DifferenceMatrix> {
    if window == 0 {
        return Err(Error::invalid("contrast_enhance", "window must be at least 1"));
    }
    let half = window / 2;
    let mut out = vec![0.0; d.data.len()];
    for j in 0..d.cols {
        for i in 0..d.rows {
            let (a, b) = (i.saturating_sub(half), (i + half).min(d.rows - 1));
            let n = (b - a + 1) as f64;
            let mean = (a..=b).map(|r| d.get(r, j)).sum::<f64>() / n;
            let var = (a..=b).map(|r| (d.get(r, j) - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let sd = if sd < 1e-12 { 1.0 } else { sd };
            out[i * d.cols + j] = (d.get(i, j) - mean) / sd;
        }
    }
    DifferenceMatrix::new(d.rows, d.cols, out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for VelocityRange {
    fn default() -> Self {
        Self { min: 0.8, max: 1.25, step: 0.125 }
    }
}

impl VelocityRange {
    /// Multiples of `step` inside `[min, max]`.
    pub fn values(&self) -> Vec<f64> {
        if !(self.step > 0.0) || self.min > self.max {
            return Vec::new();
        }
        let lo = (self.min / self.step - 1e-9).ceil() as i64;
        let hi = (self.max / self.step + 1e-9).floor() as i64;
        (lo..=hi).map(|m| m as f64 * self.step).collect()
    }
}

/// First row of the length-`d_s` window centred on query `i`.
fn window_start(i: usize, d_s: usize, rows: usize) -> usize {
    i.saturating_sub((d_s - 1) / 2).min(rows - d_s)
}

/// Best mean of `d_hat` along a constant-velocity line through `(i, j)`
/// spanning `d_s` query rows centred on `i` (shifted to fit). Row `r` reads
/// column `j + round(v * (r - i))`. Velocities whose line leaves the matrix
/// are skipped; if none fits the result is `+inf`.
pub fn sequence_score(d_hat: &DifferenceMatrix, i: usize, j: usize, d_s: usize, v: &VelocityRange) -> f64 {
    if d_s == 0 || d_s > d_hat.rows || i >= d_hat.rows || j >= d_hat.cols {
        return f64::INFINITY;
    }
    let start = window_start(i, d_s, d_hat.rows);
    let mut best = f64::INFINITY;
    'vel: for vel in v.values() {
        let mut sum = 0.0;
        for r in start..start + d_s {
            let c = j as f64 + (vel * (r as f64 - i as f64)).round();
            if c < 0.0 || c >= d_hat.cols as f64 {
                continue 'vel;
            }
            sum += d_hat.get(r, c as usize);
        }
        best = best.min(sum / d_s as f64);
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub seq_len: usize,
    pub velocity: VelocityRange,
    pub enhance_window: usize,
    /// Candidates within this many columns of the best are excluded from
    /// the runner-up search (half of the exclusion window).
    pub exclusion_window: usize,
    pub ratio: f64,
    pub metric: Metric,
    pub tolerance: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            seq_len: 10,
            velocity: VelocityRange::default(),
            enhance_window: 10,
            exclusion_window: 20,
            ratio: 0.9,
            metric: Metric::Sad,
            tolerance: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub query: usize,
    pub reference: usize,
    /// Best sequence score over the best score outside the exclusion
    /// window; lower is more distinctive.
    pub score: f64,
    pub accepted: bool,
}

/// Per-query best reference and ratio score over an enhanced, min-shifted
/// difference matrix.
pub fn match_difference(d: &DifferenceMatrix, cfg: &MatchConfig) -> Result<Vec<MatchResult>> {
    if d.rows < cfg.seq_len || d.cols < cfg.seq_len || cfg.seq_len == 0 {
        return Err(Error::invalid(
            "match",
            format!("trajectories of {} and {} frames are shorter than d_s = {}", d.rows, d.cols, cfg.seq_len),
        ));
    }
    let mut e = contrast_enhance(d, cfg.enhance_window)?;
    let lo = e.min();
    e.data.iter_mut().for_each(|v| *v -= lo);
    let half = cfg.exclusion_window / 2;
    Ok((0..d.rows)
        .into_par_iter()
        .map(|i| {
            let scores: Vec<f64> = (0..e.cols).map(|j| sequence_score(&e, i, j, cfg.seq_len, &cfg.velocity)).collect();
            let (best_j, best) = scores.iter().copied().enumerate().fold((0, f64::INFINITY), |a, (j, s)| if s < a.1 { (j, s) } else { a });
            let second = scores
                .iter()
                .enumerate()
                .filter(|(j, _)| j.abs_diff(best_j) > half)
                .map(|(_, &s)| s)
                .fold(f64::INFINITY, f64::min);
            let score = ratio(best, second);
            MatchResult {
                query: i,
                reference: best_j,
                score,
                accepted: score <= cfg.ratio,
            }
        })
        .collect())
}

fn ratio(best: f64, second: f64) -> f64 {
    if best == second {
        1.0
    } else if second.is_infinite() {
        0.0
    } else {
        best / second
    }
}

pub fn match_sequences(query: &[Vec<f32>], reference: &[Vec<f32>], cfg: &MatchConfig) -> Result<Vec<MatchResult>> {
    match_difference(&difference_matrix(query, reference, cfg.metric)?, cfg)
}

/// Within `tolerance` frames of the truth, inclusive.
pub fn is_correct(matched: usize, truth: usize, tolerance: usize) -> bool {
    matched.abs_diff(truth) <= tolerance
}

/// Writes `query_index,ref_index,score,accepted,correct`, taking the truth
/// for query `i` to be reference `i + offset`.
pub fn write_matches(path: &Path, results: &[MatchResult], offset: isize, tolerance: usize) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["query_index", "ref_index", "score", "accepted", "correct"]).map_err(err)?;
    for m in results {
        let correct = truth(m.query, offset).is_some_and(|t| is_correct(m.reference, t, tolerance));
        w.serialize((m.query, m.reference, m.score, m.accepted as u8, correct as u8)).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn truth(query: usize, offset: isize) -> Option<usize> {
    usize::try_from(query as isize + offset).ok()
}

/// Rows of a match CSV as (score, correct).
pub fn read_match_scores(path: &Path) -> Result<Vec<(f64, bool)>> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = Vec::new();
    for rec in r.deserialize::<(usize, usize, f64, u8, u8)>() {
        let (_, _, score, _, correct) = rec.map_err(err)?;
        out.push((score, correct != 0));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no matches", path.display())));
    }
    Ok(out)
}
