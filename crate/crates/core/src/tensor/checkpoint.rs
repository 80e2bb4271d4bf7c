//! `MDFLW001` parameter files: magic, then until EOF one record per tensor:
//! name length (u32), UTF-8 name, rank (u32), dims (u32 each), values (f32).
//! All integers and reals little-endian.

use std::path::Path;

use super::{ParamStore, Tensor};
use crate::binio::{to_u32, Reader, Writer};
use crate::error::Result;
use crate::scalar::Real;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"MDFLW001";

pub fn write_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let mut w = Writer::new(WEIGHTS_MAGIC);
    for (name, t) in store.iter() {
        w.u32(to_u32(name.len(), "name length")?);
        w.bytes(name.as_bytes());
        w.u32(to_u32(t.rank(), "rank")?);
        for &d in t.shape() {
            w.u32(to_u32(d, "dimension")?);
        }
        w.f32s(t.data().iter().map(|v| v.to_f32_lossy()));
    }
    w.finish(path)
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let mut r = Reader::open(path)?;
    r.magic(WEIGHTS_MAGIC)?;
    let mut store = ParamStore::new();
    while !r.at_end() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|_| r.fail("name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.fail(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape.contains(&0) {
            return Err(r.fail(format!("zero dimension in {name}")));
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("size overflow"))?;
        let vals = r.f32s(n)?;
        let data = vals.into_iter().map(|v| T::lit(v as f64)).collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mdflw");
        let mut s = ParamStore::<f32>::new();
        s.insert("enc.conv1.w", Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 * 0.5 - 1.0));
        s.insert("b", Tensor::scalar(3.25));
        write_checkpoint(&path, &s).unwrap();
        let back: ParamStore<f32> = read_checkpoint(&path).unwrap();
        assert_eq!(back, s);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"MDFLW001");
        // first record is "b": len=1, 'b', rank=1, dim=1, 3.25
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'b');
        assert_eq!(&bytes[21..25], &3.25f32.to_le_bytes());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_checkpoint::<f32>(&path).is_err());

        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = read_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
