//! Volume files and the dataset manifest.
//!
//! A volume file is the magic `NDLV`, a `u32` version, a `u32` dtype code
//! (1 = f32, 2 = u8), three `u32` extents `(z, y, x)` and the row-major
//! voxels, all little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CandidateRecord, ClassLabel, Dataset, FoldSplit, Mask, Provenance, Volume, VolumePatch,
};
use crate::error::{data_err, Error, Result};

const MAGIC: &[u8; 4] = b"NDLV";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const DTYPE_U8: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(VolumePatch),
    U8(Mask),
}

fn header(dtype: u32, shape: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::from(&MAGIC[..]);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub(crate) fn encode_volume(v: &VolumeData) -> Vec<u8> {
    match v {
        VolumeData::F32(p) => {
            let mut out = header(DTYPE_F32, p.shape);
            p.data
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            out
        }
        VolumeData::U8(m) => {
            let mut out = header(DTYPE_U8, m.shape);
            out.extend_from_slice(&m.data);
            out
        }
    }
}

fn format_err(message: String) -> Error {
    Error::Format {
        version: VERSION,
        message,
    }
}

pub(crate) fn decode_volume(bytes: &[u8]) -> Result<VolumeData> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(format_err("not a volume file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(Error::Format {
            version: word(0),
            message: format!("unsupported volume version, expected {VERSION}"),
        });
    }
    let shape = [word(2) as usize, word(3) as usize, word(4) as usize];
    let n: usize = shape.iter().product();
    let body = &bytes[24..];
    match word(1) {
        DTYPE_F32 if body.len() == 4 * n => Ok(VolumeData::F32(Volume::new(
            shape,
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?)),
        DTYPE_U8 if body.len() == n => Ok(VolumeData::U8(Volume::new(shape, body.to_vec())?)),
        DTYPE_F32 | DTYPE_U8 => Err(format_err(format!(
            "volume body has {} bytes for shape {shape:?}",
            body.len()
        ))),
        d => Err(format_err(format!("unknown dtype code {d}"))),
    }
}

pub fn write_volume(path: &Path, v: &VolumeData) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VolumeData> {
    decode_volume(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    scan_id: u32,
    class: String,
    provenance: String,
    patch_path: String,
    mask_path: String,
    fold: Option<usize>,
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes `patches/<id>.ndlv`, `masks/<id>.ndlv` and `manifest.csv` under
/// `dir`. Paths in the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, split: Option<&FoldSplit>) -> Result<()> {
    for sub in ["patches", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &dataset.records {
        let patch_path = format!("patches/{}.ndlv", r.id);
        write_volume(&dir.join(&patch_path), &VolumeData::F32(r.patch.clone()))?;
        let mask_path = match &r.mask {
            Some(m) => {
                let p = format!("masks/{}.ndlv", r.id);
                write_volume(&dir.join(&p), &VolumeData::U8(m.clone()))?;
                p
            }
            None => String::new(),
        };
        w.serialize(ManifestRow {
            id: r.id.clone(),
            scan_id: r.scan_id,
            class: r.class.to_string(),
            provenance: r.provenance.to_string(),
            patch_path,
            mask_path,
            fold: split.and_then(|s| s.fold_of(&r.id)),
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`write_dataset`]. The split is returned
/// when every row carries a fold.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Option<FoldSplit>)> {
    let mut rd = csv::Reader::from_path(dir.join(MANIFEST))?;
    let mut records = Vec::new();
    let mut folds = Vec::new();
    for row in rd.deserialize() {
        let row: ManifestRow = row?;
        let VolumeData::F32(patch) = read_volume(&dir.join(&row.patch_path))? else {
            return Err(data_err!("{}: patch file is not f32", row.id));
        };
        let mask = if row.mask_path.is_empty() {
            None
        } else {
            match read_volume(&dir.join(&row.mask_path))? {
                VolumeData::U8(m) => Some(m),
                VolumeData::F32(_) => return Err(data_err!("{}: mask file is not u8", row.id)),
            }
        };
        folds.push(row.fold);
        records.push(CandidateRecord {
            id: row.id,
            scan_id: row.scan_id,
            class: row.class.parse::<ClassLabel>()?,
            patch,
            mask,
            provenance: row.provenance.parse::<Provenance>()?,
        });
    }
    let split = if !folds.is_empty() && folds.iter().all(Option::is_some) {
        let assignment = records
            .iter()
            .zip(&folds)
            .map(|(r, f)| (r.id.clone(), f.unwrap()))
            .collect();
        let k = folds.iter().flatten().max().unwrap() + 1;
        Some(FoldSplit { k, assignment })
    } else {
        None
    };
    Ok((Dataset { records }, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_and_errors() {
        let p =
            VolumeData::F32(Volume::new([1, 2, 3], vec![0.5, 1.0, -2.0, 3.25, 0.0, 1e-7]).unwrap());
        assert_eq!(decode_volume(&encode_volume(&p)).unwrap(), p);
        let m = VolumeData::U8(Volume::new([2, 1, 1], vec![0, 1]).unwrap());
        let bytes = encode_volume(&m);
        assert_eq!(&bytes[..4], b"NDLV");
        assert_eq!(decode_volume(&bytes).unwrap(), m);
        assert!(decode_volume(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_volume(&bad), Err(Error::Format { .. })));
    }
}
