//! Per-image capsule outputs and the `MDFLF001` feature file.

use std::path::Path;

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FEATURES_MAGIC: &[u8; 8] = b"MDFLF001";

/// Capsule outputs `v` (`K x D`); each row is one capsule.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaceFeature<T> {
    v: Tensor<T>,
}

impl<T: Real> PlaceFeature<T> {
    pub fn new(v: Tensor<T>) -> Result<Self> {
        if v.rank() != 2 {
            return Err(Error::invalid("place_feature", format!("expected K x D, got {:?}", v.shape())));
        }
        Ok(Self { v })
    }

    pub fn capsules(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.v
    }

    pub fn norms(&self) -> Vec<T> {
        self.v
            .data()
            .chunks(self.dim())
            .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect()
    }

    /// Splits every capsule into its leading `D - d_c` geometric columns
    /// (`z_G`) and trailing `d_c` condition columns (`z_C`).
    pub fn split_condition(&self, d_c: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let (k, d) = (self.capsules(), self.dim());
        if d_c == 0 || d_c >= d {
            return Err(Error::invalid("split_condition", format!("D_C = {d_c} outside [1, {d})")));
        }
        let g = d - d_c;
        let data = self.v.data();
        let zg = data.chunks(d).flat_map(|c| c[..g].iter().copied()).collect();
        let zc = data.chunks(d).flat_map(|c| c[g..].iter().copied()).collect();
        Ok((Tensor::new(vec![k, g], zg)?, Tensor::new(vec![k, d_c], zc)?))
    }

    /// Inverse of [`split_condition`](Self::split_condition).
    pub fn concat(zg: &Tensor<T>, zc: &Tensor<T>) -> Result<Self> {
        if zg.rank() != 2 || zc.rank() != 2 || zg.shape()[0] != zc.shape()[0] {
            return Err(Error::shape("concat", zg.shape(), zc.shape()));
        }
        let (g, c) = (zg.shape()[1], zc.shape()[1]);
        let data = zg
            .data()
            .chunks(g)
            .zip(zc.data().chunks(c))
            .flat_map(|(a, b)| a.iter().chain(b).copied())
            .collect();
        Self::new(Tensor::new(vec![zg.shape()[0], g + c], data)?)
    }
}

/// A sequence of per-frame feature vectors of shape `K x D`, of which the
/// trailing `d_c` columns of every row are condition features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub k: usize,
    pub d: usize,
    pub d_c: usize,
    pub rows: Vec<Vec<f32>>,
}

impl FeatureSet {
    pub fn new(k: usize, d: usize, d_c: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        if k == 0 || d == 0 || d_c >= d {
            return Err(Error::invalid("feature_set", format!("bad layout K={k} D={d} D_C={d_c}")));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != k * d) {
            return Err(Error::invalid("feature_set", format!("row {bad} has {} values, want {}", rows[bad].len(), k * d)));
        }
        Ok(Self { k, d, d_c, rows })
    }

    /// Flat, unsplit descriptors (`K = 1`, `D_C = 0`).
    pub fn plain(rows: Vec<Vec<f32>>) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        Self::new(1, d, 0, rows)
    }

    pub fn from_places<T: Real>(places: &[PlaceFeature<T>], d_c: usize) -> Result<Self> {
        let first = places.first().ok_or_else(|| Error::invalid("feature_set", "no frames"))?;
        let rows = places.iter().map(|p| p.values().data().iter().map(|v| v.to_f32_lossy()).collect()).collect();
        Self::new(first.capsules(), first.dim(), d_c, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows with the condition columns of every capsule removed.
    pub fn geometric(&self) -> Vec<Vec<f32>> {
        let g = self.d - self.d_c;
        self.rows
            .iter()
            .map(|r| r.chunks(self.d).flat_map(|c| c[..g].iter().copied()).collect())
            .collect()
    }

    /// Per-row condition blocks, flattened.
    pub fn condition(&self) -> Vec<Vec<f32>> {
        let g = self.d - self.d_c;
        self.rows
            .iter()
            .map(|r| r.chunks(self.d).flat_map(|c| c[g..].iter().copied()).collect())
            .collect()
    }
}

/// Header: frame count, K, D, D_C (u32 each); then the rows as f32.
pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let mut w = Writer::new(FEATURES_MAGIC);
    w.u32(to_u32(set.len(), "frame count")?);
    w.u32(to_u32(set.k, "K")?);
    w.u32(to_u32(set.d, "D")?);
    w.u32(to_u32(set.d_c, "D_C")?);
    for r in &set.rows {
        w.f32s(r.iter().copied());
    }
    w.finish(path)
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let mut r = Reader::open(path)?;
    r.magic(FEATURES_MAGIC)?;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let d_c = r.u32()? as usize;
    if k == 0 || d == 0 || d_c >= d {
        return Err(r.fail(format!("bad layout K={k} D={d} D_C={d_c}")));
    }
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        rows.push(r.f32s(k * d)?);
    }
    if !r.at_end() {
        return Err(r.fail("trailing bytes"));
    }
    FeatureSet::new(k, d, d_c, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(k: usize, d: usize) -> PlaceFeature<f32> {
        PlaceFeature::new(Tensor::from_fn(&[k, d], |i| (i as f32 * 0.37).sin() * 0.2)).unwrap()
    }

    #[test]
    fn split_shapes_and_round_trip() {
        let f = feature(64, 16);
        let (zg, zc) = f.split_condition(4).unwrap();
        assert_eq!((zg.shape(), zc.shape()), (&[64, 12][..], &[64, 4][..]));
        assert_eq!(PlaceFeature::concat(&zg, &zc).unwrap(), f);
        let (_, zc) = f.split_condition(3).unwrap();
        assert_eq!(zc.shape(), &[64, 3]);
        assert_eq!(zc.data()[..3], f.values().data()[13..16]);
    }

    #[test]
    fn split_rejects_out_of_range() {
        let f = feature(4, 16);
        assert!(f.split_condition(0).is_err());
        assert!(f.split_condition(16).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let places = vec![feature(3, 5), feature(3, 5)];
        let set = FeatureSet::from_places(&places, 2).unwrap();
        write_features(&path, &set).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.geometric()[0].len(), 9);
        assert_eq!(back.condition()[1].len(), 6);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 16 + 2 * 15 * 4);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_features(&path).is_err());
    }
}
