//! Synthetic candidate patches, shift augmentation, scan-grouped k-fold
//! splitting and on-disk storage.

mod io;
mod synth;

pub use io::{read_dataset, read_volume, write_dataset, write_volume, VolumeData};
pub use synth::{generate_synthetic, SynthConfig};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Nodule,
    NonNodule,
    Unlabeled,
}

impl ClassLabel {
    /// Classification target index, `None` when unlabeled.
    pub fn index(self) -> Option<usize> {
        match self {
            ClassLabel::Nodule => Some(crate::model::NODULE),
            ClassLabel::NonNodule => Some(1 - crate::model::NODULE),
            ClassLabel::Unlabeled => None,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == crate::model::NODULE {
            ClassLabel::Nodule
        } else {
            ClassLabel::NonNodule
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Manual,
    Pseudo,
    SyntheticTruth,
}

macro_rules! text_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(data_err!("unknown {} {s:?}", stringify!($t))),
                }
            }
        }
    };
}

text_enum!(ClassLabel, ClassLabel::Nodule => "nodule", ClassLabel::NonNodule => "non-nodule", ClassLabel::Unlabeled => "unlabeled");
text_enum!(Provenance, Provenance::Manual => "manual", Provenance::Pseudo => "pseudo", Provenance::SyntheticTruth => "synthetic-truth");

/// A `(z, y, x)` block of voxels in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub shape: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Copy + Default> Volume<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(shape_err!(
                "volume {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            ));
        }
        Ok(Volume { shape, data })
    }

    pub fn filled(shape: [usize; 3], v: T) -> Self {
        Volume {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    /// Translates the contents by `offset` voxels along `axis`; vacated
    /// voxels become `T::default()`.
    pub fn shifted(&self, axis: usize, offset: isize) -> Self {
        let mut out = Volume::filled(self.shape, T::default());
        let [nz, ny, nx] = self.shape;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut p = [z as isize, y as isize, x as isize];
                    p[axis] -= offset;
                    if (0..self.shape[axis] as isize).contains(&p[axis]) {
                        let i = out.index(z, y, x);
                        out.data[i] =
                            self.data[self.index(p[0] as usize, p[1] as usize, p[2] as usize)];
                    }
                }
            }
        }
        out
    }
}

pub type VolumePatch = Volume<f32>;
pub type Mask = Volume<u8>;

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRecord {
    pub id: String,
    pub scan_id: u32,
    pub class: ClassLabel,
    pub patch: VolumePatch,
    pub mask: Option<Mask>,
    pub provenance: Provenance,
}

/// Separates a parent id from the augmentation suffix.
pub const VARIANT_SEP: char = '~';

impl CandidateRecord {
    /// Id of the record this one was derived from by augmentation.
    pub fn parent_id(&self) -> Option<&str> {
        self.id.split_once(VARIANT_SEP).map(|(p, _)| p)
    }

    pub fn mask_voxels(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(0, |m| m.data.iter().filter(|&&v| v != 0).count())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<CandidateRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CandidateRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn count(&self, class: ClassLabel) -> usize {
        self.records.iter().filter(|r| r.class == class).count()
    }

    pub fn scan_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.scan_id)
            .collect::<BTreeSet<_>>()
            .len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    PlusZ,
    MinusZ,
    PlusY,
    MinusY,
    PlusX,
    MinusX,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::PlusZ,
        Direction::MinusZ,
        Direction::PlusY,
        Direction::MinusY,
        Direction::PlusX,
        Direction::MinusX,
    ];

    fn axis_sign(self) -> (usize, isize) {
        match self {
            Direction::PlusZ => (0, 1),
            Direction::MinusZ => (0, -1),
            Direction::PlusY => (1, 1),
            Direction::MinusY => (1, -1),
            Direction::PlusX => (2, 1),
            Direction::MinusX => (2, -1),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Direction::PlusZ => "+z",
            Direction::MinusZ => "-z",
            Direction::PlusY => "+y",
            Direction::MinusY => "-y",
            Direction::PlusX => "+x",
            Direction::MinusX => "-x",
        }
    }
}

/// Translates patch and mask together. The new id is the parent id plus
/// the direction and magnitude.
pub fn augment_shift(
    record: &CandidateRecord,
    direction: Direction,
    magnitude: usize,
) -> Result<CandidateRecord> {
    let (axis, sign) = direction.axis_sign();
    let extent = record.patch.shape[axis];
    if magnitude >= extent {
        return Err(config_err!(
            "shift of {magnitude} voxels does not fit an extent of {extent}"
        ));
    }
    let offset = sign * magnitude as isize;
    let base = record.parent_id().unwrap_or(&record.id);
    let suffix = record
        .id
        .split_once(VARIANT_SEP)
        .map(|(_, s)| s)
        .unwrap_or("");
    Ok(CandidateRecord {
        id: format!("{base}{VARIANT_SEP}{suffix}{}{magnitude}", direction.tag()),
        scan_id: record.scan_id,
        class: record.class,
        patch: record.patch.shifted(axis, offset),
        mask: record.mask.as_ref().map(|m| m.shifted(axis, offset)),
        provenance: record.provenance,
    })
}

/// Adds the six unit-shift variants of every original nodule record,
/// each placed right after its parent.
pub fn balance_by_augmentation(dataset: &Dataset) -> Result<Dataset> {
    if dataset.count(ClassLabel::Nodule) == 0 || dataset.count(ClassLabel::NonNodule) == 0 {
        return Err(data_err!(
            "balancing needs both nodule and non-nodule records"
        ));
    }
    let mut out = Vec::with_capacity(dataset.len() + 6 * dataset.count(ClassLabel::Nodule));
    for r in &dataset.records {
        out.push(r.clone());
        if r.class == ClassLabel::Nodule && r.parent_id().is_none() {
            for d in Direction::ALL {
                out.push(augment_shift(r, d, 1)?);
            }
        }
    }
    Ok(Dataset { records: out })
}

/// Fold index per record id; every candidate of a scan shares a fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Indices of `dataset` records in `fold` (`held_out`) or outside it.
    pub fn indices(&self, dataset: &Dataset, fold: usize, held_out: bool) -> Vec<usize> {
        dataset
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| (self.fold_of(&r.id) == Some(fold)) == held_out)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Shuffles the scans with a seeded RNG and deals them round-robin into
/// `k` folds.
pub fn kfold_split(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(config_err!("fold count must be at least 1"));
    }
    let mut scans: Vec<u32> = dataset
        .records
        .iter()
        .map(|r| r.scan_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if scans.len() < k {
        return Err(config_err!("{} scans cannot fill {k} folds", scans.len()));
    }
    scans.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold: HashMap<u32, usize> = scans.iter().enumerate().map(|(i, &s)| (s, i % k)).collect();
    let assignment = dataset
        .records
        .iter()
        .map(|r| (r.id.clone(), fold[&r.scan_id]))
        .collect();
    Ok(FoldSplit { k, assignment })
}

/// Every violated dataset invariant, as readable messages.
pub fn check_invariants(dataset: &Dataset, split: Option<&FoldSplit>) -> Vec<String> {
    let mut bad = Vec::new();
    let mut seen = HashMap::new();
    for r in &dataset.records {
        if seen.insert(r.id.as_str(), r).is_some() {
            bad.push(format!("duplicate id {}", r.id));
        }
        if let Some(m) = &r.mask {
            if m.shape != r.patch.shape {
                bad.push(format!(
                    "{}: mask shape {:?} differs from patch {:?}",
                    r.id, m.shape, r.patch.shape
                ));
            }
            if m.data.iter().any(|&v| v > 1) {
                bad.push(format!("{}: mask is not binary", r.id));
            }
        }
        if r.patch.data.iter().any(|v| !v.is_finite()) {
            bad.push(format!("{}: non-finite intensity", r.id));
        }
        if r.class == ClassLabel::Nodule
            && r.provenance == Provenance::SyntheticTruth
            && r.mask_voxels() == 0
        {
            bad.push(format!("{}: nodule without mask voxels", r.id));
        }
        if r.class == ClassLabel::NonNodule && r.mask_voxels() != 0 {
            bad.push(format!("{}: non-nodule with mask voxels", r.id));
        }
    }
    for r in &dataset.records {
        if let Some(p) = r.parent_id() {
            match seen.get(p) {
                None => bad.push(format!("{}: parent {p} missing", r.id)),
                Some(parent) if parent.scan_id != r.scan_id => {
                    bad.push(format!("{}: scan differs from parent", r.id))
                }
                _ => {}
            }
        }
    }
    if let Some(split) = split {
        let mut scan_fold: HashMap<u32, usize> = HashMap::new();
        for r in &dataset.records {
            let Some(f) = split.fold_of(&r.id) else {
                bad.push(format!("{}: no fold", r.id));
                continue;
            };
            if f >= split.k {
                bad.push(format!("{}: fold {f} outside 0..{}", r.id, split.k));
            }
            if *scan_fold.entry(r.scan_id).or_insert(f) != f {
                bad.push(format!("scan {} straddles folds", r.scan_id));
            }
            if let Some(p) = r.parent_id() {
                if split.fold_of(p) != Some(f) {
                    bad.push(format!("{}: fold differs from parent {p}", r.id));
                }
            }
        }
        if split.assignment.len() != dataset.len() {
            bad.push(format!(
                "split covers {} ids, dataset has {}",
                split.assignment.len(),
                dataset.len()
            ));
        }
    }
    bad
}

/// `[b, 1, z, y, x]` network input from patches.
pub fn stack_patches<'a>(records: impl IntoIterator<Item = &'a CandidateRecord>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    let mut b = 0;
    for r in records {
        if *shape.get_or_insert(r.patch.shape) != r.patch.shape {
            return Err(shape_err!("patches of different shapes in one batch"));
        }
        data.extend(r.patch.data.iter().map(|&v| f64::from(v)));
        b += 1;
    }
    let [z, y, x] = shape.ok_or_else(|| data_err!("empty batch"))?;
    Tensor::new(&[b, 1, z, y, x], data)
}

/// Mask target for a batch plus per-sample weights: records without a
/// mask get weight 0 and an all-zero target.
pub fn stack_masks<'a>(
    records: impl IntoIterator<Item = &'a CandidateRecord>,
) -> Result<(Tensor, Vec<f64>)> {
    let mut data = Vec::new();
    let mut weights = Vec::new();
    let mut shape = None;
    for r in records {
        let s = *shape.get_or_insert(r.patch.shape);
        let n = s.iter().product::<usize>();
        match &r.mask {
            Some(m) => {
                data.extend(m.data.iter().map(|&v| f64::from(v)));
                weights.push(1.0);
            }
            None => {
                data.extend(std::iter::repeat(0.0).take(n));
                weights.push(0.0);
            }
        }
    }
    let [z, y, x] = shape.ok_or_else(|| data_err!("empty batch"))?;
    Ok((Tensor::new(&[weights.len(), 1, z, y, x], data)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, scan: u32, class: ClassLabel) -> CandidateRecord {
        let shape = [3, 4, 5];
        let patch = Volume::new(shape, (0..60).map(|i| i as f32).collect()).unwrap();
        let mut mask = Volume::filled(shape, 0u8);
        if class == ClassLabel::Nodule {
            for i in [7, 8, 12, 13, 27, 28] {
                mask.data[i] = 1;
            }
        }
        CandidateRecord {
            id: id.into(),
            scan_id: scan,
            class,
            patch,
            mask: Some(mask),
            provenance: Provenance::SyntheticTruth,
        }
    }

    #[test]
    fn zero_shift_changes_only_the_id() {
        let r = record("a", 0, ClassLabel::Nodule);
        let s = augment_shift(&r, Direction::PlusX, 0).unwrap();
        assert_ne!(s.id, r.id);
        assert_eq!(s.parent_id(), Some("a"));
        assert_eq!((&s.patch, &s.mask), (&r.patch, &r.mask));
    }

    #[test]
    fn opposite_shifts_restore_the_interior() {
        let r = record("a", 0, ClassLabel::Nodule);
        let back = augment_shift(
            &augment_shift(&r, Direction::PlusX, 2).unwrap(),
            Direction::MinusX,
            2,
        )
        .unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let i = r.patch.index(z, y, x);
                    let want = if x < 3 { r.patch.data[i] } else { 0.0 };
                    assert_eq!(back.patch.data[i], want);
                }
            }
        }
        assert_eq!(back.parent_id(), Some("a"));
    }

    #[test]
    fn out_of_range_shift_is_rejected() {
        let r = record("a", 0, ClassLabel::Nodule);
        assert!(matches!(
            augment_shift(&r, Direction::MinusZ, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn balancing_multiplies_nodules_by_seven() {
        let mut ds = Dataset::default();
        for i in 0..10 {
            ds.records
                .push(record(&format!("n{i}"), i, ClassLabel::Nodule));
        }
        for i in 0..70 {
            ds.records
                .push(record(&format!("c{i}"), i % 10, ClassLabel::NonNodule));
        }
        let b = balance_by_augmentation(&ds).unwrap();
        assert_eq!(b.count(ClassLabel::Nodule), 70);
        assert_eq!(b.count(ClassLabel::NonNodule), 70);
        assert!(check_invariants(&b, None).is_empty());
        assert!(b
            .records
            .iter()
            .all(|r| r.provenance == Provenance::SyntheticTruth));
    }

    #[test]
    fn balancing_needs_both_classes() {
        let ds = Dataset {
            records: vec![record("n", 0, ClassLabel::Nodule)],
        };
        assert!(matches!(balance_by_augmentation(&ds), Err(Error::Data(_))));
    }

    #[test]
    fn folds_partition_and_keep_scans_whole() {
        let mut ds = Dataset::default();
        for s in 0..7 {
            ds.records
                .push(record(&format!("n{s}"), s, ClassLabel::Nodule));
            ds.records
                .push(record(&format!("c{s}"), s, ClassLabel::NonNodule));
        }
        let split = kfold_split(&ds, 3, 5).unwrap();
        assert!(check_invariants(&ds, Some(&split)).is_empty());
        let total: usize = (0..3).map(|f| split.indices(&ds, f, true).len()).sum();
        assert_eq!(total, ds.len());
        let one = kfold_split(&ds, 1, 5).unwrap();
        assert!(one.assignment.values().all(|&f| f == 0));
        assert!(matches!(kfold_split(&ds, 8, 5), Err(Error::Config(_))));
        assert_eq!(kfold_split(&ds, 3, 5).unwrap(), split);
    }

    #[test]
    fn text_forms_round_trip() {
        for c in [
            ClassLabel::Nodule,
            ClassLabel::NonNodule,
            ClassLabel::Unlabeled,
        ] {
            assert_eq!(c.to_string().parse::<ClassLabel>().unwrap(), c);
        }
        for p in [
            Provenance::Manual,
            Provenance::Pseudo,
            Provenance::SyntheticTruth,
        ] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
        assert!("maybe".parse::<ClassLabel>().is_err());
    }
}
