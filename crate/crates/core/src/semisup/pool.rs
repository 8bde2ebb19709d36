use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    read_volume, write_volume, CandidateRecord, ClassLabel, Dataset, Provenance, VolumeData,
};
use crate::error::{data_err, Error, Result};

/// Where a pool entry's labels came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Manual,
    /// Produced by the model after the given self-training round's
    /// preceding training phase.
    Pseudo {
        round: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub record: CandidateRecord,
    pub origin: Origin,
}

/// Training records, each flagged manual or pseudo. Entries are only ever
/// appended.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPool {
    entries: Vec<PoolEntry>,
}

impl LabeledPool {
    /// Pool of manually labelled records. Every record needs a class label.
    pub fn manual(records: Vec<CandidateRecord>) -> Result<Self> {
        let mut pool = LabeledPool::default();
        for record in records {
            pool.push(PoolEntry {
                record,
                origin: Origin::Manual,
            })?;
        }
        Ok(pool)
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.entries.iter().map(|e| &e.record)
    }

    pub fn count(&self, pseudo: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.origin, Origin::Pseudo { .. }) == pseudo)
            .count()
    }

    pub(crate) fn push(&mut self, entry: PoolEntry) -> Result<()> {
        if entry.record.class == ClassLabel::Unlabeled {
            return Err(data_err!(
                "{}: pool records need a class label",
                entry.record.id
            ));
        }
        if self.entries.iter().any(|e| e.record.id == entry.record.id) {
            return Err(data_err!("{}: already in the pool", entry.record.id));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub(crate) fn ids(&self) -> HashSet<&str> {
        self.records().map(|r| r.id.as_str()).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolRow {
    id: String,
    provenance: String,
    round: Option<usize>,
    class: String,
    mask_path: String,
}

pub const POOL_MANIFEST: &str = "pool.csv";

/// Writes `pool.csv` and one mask file per masked entry under `dir`.
pub fn write_pool(dir: &Path, pool: &LabeledPool) -> Result<()> {
    let masks = dir.join("masks");
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let path = dir.join(POOL_MANIFEST);
    let mut w = csv::Writer::from_path(&path)?;
    for e in &pool.entries {
        let r = &e.record;
        let mask_path = match &r.mask {
            Some(m) => {
                let p = format!("masks/{}.ndlv", r.id);
                write_volume(&dir.join(&p), &VolumeData::U8(m.clone()))?;
                p
            }
            None => String::new(),
        };
        w.serialize(PoolRow {
            id: r.id.clone(),
            provenance: r.provenance.to_string(),
            round: match e.origin {
                Origin::Manual => None,
                Origin::Pseudo { round } => Some(round),
            },
            class: r.class.to_string(),
            mask_path,
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Rebuilds a pool written by [`write_pool`], taking patches from `source`.
pub fn read_pool(dir: &Path, source: &Dataset) -> Result<LabeledPool> {
    let mut rd = csv::Reader::from_path(dir.join(POOL_MANIFEST))?;
    let mut pool = LabeledPool::default();
    for row in rd.deserialize() {
        let row: PoolRow = row?;
        let base = source
            .get(&row.id)
            .ok_or_else(|| data_err!("{}: not in the dataset", row.id))?;
        let mask = if row.mask_path.is_empty() {
            None
        } else {
            match read_volume(&dir.join(&row.mask_path))? {
                VolumeData::U8(m) => Some(m),
                VolumeData::F32(_) => return Err(data_err!("{}: mask file is not u8", row.id)),
            }
        };
        let provenance: Provenance = row.provenance.parse()?;
        let origin = match row.round {
            Some(round) => Origin::Pseudo { round },
            None => Origin::Manual,
        };
        pool.push(PoolEntry {
            record: CandidateRecord {
                id: row.id,
                scan_id: base.scan_id,
                class: row.class.parse()?,
                patch: base.patch.clone(),
                mask,
                provenance,
            },
            origin,
        })?;
    }
    Ok(pool)
}
