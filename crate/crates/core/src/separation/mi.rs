//! Plug-in mutual information between a binned scalar summary of a feature
//! block and a discrete label.

use crate::error::{Error, Result};

/// `I(X; Y)` in bits from a joint count table (`rows` = X bins, columns = Y).
pub fn mi_from_counts(counts: &[Vec<u64>]) -> Result<f64> {
    let cols = counts.first().map(Vec::len).unwrap_or(0);
    if cols == 0 || counts.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("mutual_information", "ragged or empty count table"));
    }
    let n: u64 = counts.iter().flatten().sum();
    if n == 0 {
        return Ok(0.0);
    }
    let n = n as f64;
    let row: Vec<f64> = counts.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col: Vec<f64> = (0..cols).map(|j| counts.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let mut mi = 0.0;
    for (i, r) in counts.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row[i] * col[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Histogram estimate of `I(z; label)` in bits, with `z` cut into `bins`
/// equal-width bins over its observed range. Constant `z` gives 0.
pub fn mutual_information(z: &[f64], labels: &[usize], bins: usize) -> Result<f64> {
    if z.len() != labels.len() || z.is_empty() {
        return Err(Error::invalid("mutual_information", format!("{} samples for {} labels", z.len(), labels.len())));
    }
    if bins < 2 {
        return Err(Error::invalid("mutual_information", "need at least 2 bins"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::invalid("mutual_information", "need at least 2 distinct labels"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature summary".into()));
    }
    let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
    if hi - lo <= 0.0 {
        return Ok(0.0);
    }
    let mut counts = vec![vec![0u64; classes]; bins];
    for (&v, &l) in z.iter().zip(labels) {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)][l] += 1;
    }
    mi_from_counts(&counts)
}
