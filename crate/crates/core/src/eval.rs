//! Precision-recall curves over match scores, their area, and comparison
//! reports across methods and condition pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// (recall, precision) with recall non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps an acceptance threshold over `-inf`, every distinct score, and
/// `+inf`; a query is accepted when its score is at most the threshold
/// (lower is better, ties accepted together). Recall counts correct
/// accepts over all queries. The empty acceptance set borrows the precision
/// of the first non-empty threshold.
pub fn pr_curve(scores: &[f64], correct: &[bool]) -> Result<PrCurve> {
    if scores.is_empty() || scores.len() != correct.len() {
        return Err(Error::invalid("pr_curve", format!("{} scores for {} labels", scores.len(), correct.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("pr_curve", "NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let total = scores.len() as f64;
    let mut points = Vec::with_capacity(scores.len() + 2);
    let (mut accepted, mut hits) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            accepted += 1;
            hits += correct[order[k]] as usize;
            k += 1;
        }
        points.push((hits as f64 / total, hits as f64 / accepted as f64));
    }
    let first_precision = points[0].1;
    points.insert(0, (0.0, first_precision));
    points.push(*points.last().unwrap());
    let auc = auc(&points)?;
    Ok(PrCurve { points, auc })
}

/// Trapezoidal area under precision over recall.
pub fn auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("auc", "need at least two points"));
    }
    Ok(points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub name: String,
    pub method: String,
    pub pair: String,
    pub curve: PrCurve,
}

/// Per-method mean AUC over its runs.
pub fn method_averages(runs: &[Run]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in runs {
        let e = acc.entry(r.method.clone()).or_default();
        e.0 += r.curve.auc;
        e.1 += 1;
    }
    acc.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
}

/// Writes `report.csv`, `report.json` and one `pr_<run>.csv` per run into
/// `dir`; returns the paths written.
pub fn compare_report(runs: &[Run], dir: &Path, config: &BTreeMap<String, String>) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::invalid("compare_report", "no runs"));
    }
    let mut seen = BTreeSet::new();
    for r in runs {
        if r.name.is_empty() || !r.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::invalid("compare_report", format!("run name {:?} is not filename-safe", r.name)));
        }
        if !seen.insert(&r.name) {
            return Err(Error::invalid("compare_report", format!("duplicate run name {:?}", r.name)));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let averages = method_averages(runs);
    let mut written = Vec::new();

    let path = dir.join("report.csv");
    let err = |p: &Path, e: csv::Error| Error::Data(format!("{}: {e}", p.display()));
    let mut w = csv::Writer::from_path(&path).map_err(|e| err(&path, e))?;
    w.write_record(["method", "pair", "auc"]).map_err(|e| err(&path, e))?;
    for r in runs {
        w.serialize((&r.method, &r.pair, r.curve.auc)).map_err(|e| err(&path, e))?;
    }
    for (m, a) in &averages {
        w.serialize((m, "average", a)).map_err(|e| err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let json = serde_json::json!({
        "runs": runs.iter().map(|r| serde_json::json!({
            "name": r.name, "method": r.method, "pair": r.pair, "auc": r.curve.auc,
        })).collect::<Vec<_>>(),
        "averages": averages,
        "config": config,
    });
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);

    for r in runs {
        let path = dir.join(format!("pr_{}.csv", r.name));
        let mut w = csv::Writer::from_path(&path).map_err(|e| err(&path, e))?;
        w.write_record(["recall", "precision"]).map_err(|e| err(&path, e))?;
        for p in &r.curve.points {
            w.serialize(p).map_err(|e| err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
