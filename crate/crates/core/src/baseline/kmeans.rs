//! Lloyd's k-means with k-means++ seeding, and the `MDFLC001` codebook file.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const CODEBOOK_MAGIC: &[u8; 8] = b"MDFLC001";

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    centers: Vec<Vec<T>>,
}

impl<T: Real> Codebook<T> {
    pub fn new(centers: Vec<Vec<T>>) -> Result<Self> {
        let d = centers.first().map(Vec::len).unwrap_or(0);
        if d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(Error::invalid("codebook", "need at least one center of a common positive dimension"));
        }
        if centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook", "non-finite center"));
        }
        Ok(Self { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn centers(&self) -> &[Vec<T>] {
        &self.centers
    }

    /// Index of the nearest center; ties go to the lower index.
    pub fn nearest(&self, x: &[T]) -> usize {
        let mut best = (0, T::infinity());
        for (k, c) in self.centers.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

pub(crate) fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum()
}

#[derive(Clone, Debug)]
pub struct KmeansFit<T> {
    pub codebook: Codebook<T>,
    /// Sum of squared distances to the assigned center after each Lloyd
    /// iteration.
    pub objective: Vec<T>,
    pub converged: bool,
}

/// Fits K centers. Stops at an assignment fixpoint or after `max_iters`
/// iterations. A cluster that loses all its points keeps its old center.
pub fn kmeans_fit<T: Real>(points: &[Vec<T>], k: usize, seed: u64, max_iters: usize) -> Result<KmeansFit<T>> {
    if k == 0 {
        return Err(Error::invalid("kmeans_fit", "K must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::invalid("kmeans_fit", format!("K = {k} exceeds {} points", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("kmeans_fit", "points must share a positive dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_plus_plus(points, k, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let cb = Codebook { centers: centers.clone() };
        let next: Vec<usize> = points.iter().map(|p| cb.nearest(p)).collect();
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, &v)| *s += v);
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                let n = T::from_usize(n).unwrap();
                *c = s.into_iter().map(|v| v / n).collect();
            }
        }
        objective.push(points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum());
    }
    Ok(KmeansFit {
        codebook: Codebook::new(centers)?,
        objective,
        converged,
    })
}

fn seed_plus_plus<T: Real>(points: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0]).to_f64().unwrap()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            d2.iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0 && w > 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every point coincides with a center already
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]).to_f64().unwrap());
        }
    }
    centers
}

pub fn write_codebook<T: Real>(path: &Path, cb: &Codebook<T>) -> Result<()> {
    let mut w = Writer::new(CODEBOOK_MAGIC);
    w.u32(to_u32(cb.k(), "K")?);
    w.u32(to_u32(cb.dim(), "D")?);
    for c in cb.centers() {
        w.f32s(c.iter().map(|v| v.to_f32_lossy()));
    }
    w.finish(path)
}

pub fn read_codebook<T: Real>(path: &Path) -> Result<Codebook<T>> {
    let mut r = Reader::open(path)?;
    r.magic(CODEBOOK_MAGIC)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    if k == 0 || d == 0 {
        return Err(r.fail(format!("empty codebook K={k} D={d}")));
    }
    let mut centers = Vec::with_capacity(k);
    for _ in 0..k {
        centers.push(r.f32s(d)?.into_iter().map(|v| T::lit(v as f64)).collect());
    }
    if !r.at_end() {
        return Err(r.fail("trailing bytes"));
    }
    Codebook::new(centers)
}
