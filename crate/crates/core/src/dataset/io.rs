//! `MDFLD001` files: header (frame count, C, height, width, channels as u32),
//! then per record condition id (u32), frame index (u32) and raw RGB bytes.
//! A manifest CSV beside the file lists (record_no, condition_id, frame_index).

use std::path::{Path, PathBuf};

use super::{Frame, TrajectoryDataset, FRAME_BYTES, IMAGE_SIZE};
use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MDFLD001";

/// `dir/name.bin` -> `dir/name.manifest.csv`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.csv")
}

pub fn save(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let mut w = Writer::new(DATASET_MAGIC);
    w.u32(to_u32(ds.len(), "frame count")?);
    w.u32(to_u32(ds.conditions, "condition count")?);
    for d in [IMAGE_SIZE, IMAGE_SIZE, 3] {
        w.u32(d as u32);
    }
    for f in &ds.frames {
        w.u32(f.condition);
        w.u32(f.index);
        w.bytes(&f.pixels);
    }
    w.finish(path)?;

    let mpath = manifest_path(path);
    let mut csv = csv::Writer::from_path(&mpath).map_err(|e| csv_error(&mpath, e))?;
    csv.write_record(["record_no", "condition_id", "frame_index"]).map_err(|e| csv_error(&mpath, e))?;
    for (i, f) in ds.frames.iter().enumerate() {
        csv.serialize((i, f.condition, f.index)).map_err(|e| csv_error(&mpath, e))?;
    }
    csv.flush().map_err(|e| Error::io(&mpath, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn load(path: &Path) -> Result<TrajectoryDataset> {
    let mut r = Reader::open(path)?;
    r.magic(DATASET_MAGIC)?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    if dims != [IMAGE_SIZE as u32, IMAGE_SIZE as u32, 3] {
        return Err(r.fail(format!("frame dims {dims:?}, expected [{IMAGE_SIZE}, {IMAGE_SIZE}, 3]")));
    }
    if c == 0 {
        return Err(r.fail("zero conditions"));
    }
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let condition = r.u32()?;
        if condition as usize >= c {
            return Err(r.fail(format!("condition {condition} >= {c}")));
        }
        let index = r.u32()?;
        let pixels = r.bytes(FRAME_BYTES)?.to_vec();
        frames.push(Frame { condition, index, pixels });
    }
    if !r.at_end() {
        return Err(r.fail("trailing bytes"));
    }
    TrajectoryDataset::new(c, frames)
}

#[cfg(test)]
mod tests {
    use super::super::{default_conditions, generate, WorldConfig};
    use super::*;

    #[test]
    fn round_trip_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate(8, 3, &default_conditions(), &WorldConfig::default()).unwrap();
        save(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        let lines: Vec<&str> = manifest.lines().collect();
        assert_eq!(lines[0], "record_no,condition_id,frame_index");
        assert_eq!(lines[4], "3,1,0");
        assert_eq!(lines.len(), 10);
    }

    #[test]
    fn corruption_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate(8, 2, &default_conditions(), &WorldConfig::default()).unwrap();
        save(&ds, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[3] = b'?';
        std::fs::write(&path, &bad).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("magic"));

        std::fs::write(&path, &good[..good.len() - 10]).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut bad = good.clone();
        bad[8 + 8..8 + 12].copy_from_slice(&32u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("dims") && err.contains("byte 28"), "{err}");
    }
}
