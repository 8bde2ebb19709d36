//! Segmentation and detection metrics, FROC analysis and training logs.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{stack_patches, CandidateRecord, ClassLabel, Mask};
use crate::error::{data_err, shape_err, Error, Result};
use crate::model::{MultiTaskNet, Prediction};

/// False-positive rates per scan at which the FROC curve is read off.
pub const FROC_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Decision threshold on the nodule probability.
pub const CLASS_THRESHOLD: f64 = 0.5;

const EVAL_BATCH: usize = 32;

/// `2|A∩B| / (|A|+|B|)` over nonzero voxels; two empty masks score 1.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    if pred.shape != truth.shape {
        return Err(shape_err!(
            "dice: mask shapes {:?} and {:?} differ",
            pred.shape,
            truth.shape
        ));
    }
    Ok(dice_counts(&pred.data, &truth.data))
}

fn dice_counts(a: &[u8], b: &[u8]) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in a.iter().zip(b) {
        na += usize::from(p != 0);
        nb += usize::from(t != 0);
        both += usize::from(p != 0 && t != 0);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Fraction of positives with `score >= threshold`.
pub fn sensitivity(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err!(
            "sensitivity: {} scores, {} labels",
            scores.len(),
            labels.len()
        ));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "sensitivity needs at least one positive".into(),
        ));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &l)| l && s >= threshold)
        .count();
    Ok(hits as f64 / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

/// Operating points ordered by decreasing threshold, so both coordinates
/// are non-decreasing along the list.
#[derive(Clone, Debug, PartialEq)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub n_scans: usize,
}

impl FrocCurve {
    /// Builds a curve from given points, checking the ordering invariants.
    pub fn from_points(points: Vec<FrocPoint>, n_scans: usize) -> Result<Self> {
        if n_scans == 0 || points.is_empty() {
            return Err(data_err!("FROC curve needs points and at least one scan"));
        }
        for p in &points {
            if !(p.fp_per_scan >= 0.0 && (0.0..=1.0).contains(&p.sensitivity)) {
                return Err(data_err!("FROC point out of range: {p:?}"));
            }
        }
        for w in points.windows(2) {
            if w[1].fp_per_scan < w[0].fp_per_scan || w[1].sensitivity < w[0].sensitivity {
                return Err(data_err!("FROC points are not monotone"));
            }
        }
        Ok(FrocCurve { points, n_scans })
    }

    /// Largest sensitivity reached with at most `rate` false positives per
    /// scan, or 0 when no operating point fits the budget.
    pub fn sensitivity_at(&self, rate: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fp_per_scan <= rate)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, n_scans: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let points = rd
            .deserialize()
            .collect::<std::result::Result<Vec<FrocPoint>, _>>()?;
        Self::from_points(points, n_scans)
    }
}

/// Sweeps the threshold over every distinct score. A candidate counts as
/// detected when its score is at least the threshold.
pub fn froc(scores: &[f64], labels: &[bool], scan_ids: &[u32]) -> Result<FrocCurve> {
    if scores.is_empty() {
        return Err(data_err!("froc: no candidates"));
    }
    if scores.len() != labels.len() || scores.len() != scan_ids.len() {
        return Err(shape_err!(
            "froc: scores, labels and scan ids differ in length"
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("froc: non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "froc needs at least one positive".into(),
        ));
    }
    let n_scans = scan_ids.iter().collect::<BTreeSet<_>>().len();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).map_or(true, |&j| scores[j] != scores[i]);
        if last_of_tie {
            points.push(FrocPoint {
                threshold: scores[i],
                fp_per_scan: fp as f64 / n_scans as f64,
                sensitivity: tp as f64 / positives as f64,
            });
        }
    }
    FrocCurve::from_points(points, n_scans)
}

/// Mean of the sensitivities read off at `rates`.
pub fn froc_score(curve: &FrocCurve, rates: &[f64]) -> f64 {
    rates.iter().map(|&r| curve.sensitivity_at(r)).sum::<f64>() / rates.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldMetrics {
    /// Mean DSC over true-nodule records.
    pub dsc: f64,
    /// At [`CLASS_THRESHOLD`].
    pub sensitivity: f64,
    pub curve: FrocCurve,
    pub froc_score: f64,
}

/// Scores predictions against labelled records. Records must be labelled
/// nodule or non-nodule; DSC uses the nodule records that carry a mask.
pub fn evaluate_predictions(
    records: &[&CandidateRecord],
    preds: &[Prediction],
) -> Result<FoldMetrics> {
    if records.is_empty() {
        return Err(data_err!("evaluation fold is empty"));
    }
    if records.len() != preds.len() {
        return Err(shape_err!(
            "{} records, {} predictions",
            records.len(),
            preds.len()
        ));
    }
    let mut labels = Vec::with_capacity(records.len());
    let mut dscs = Vec::new();
    for (r, p) in records.iter().zip(preds) {
        let is_nodule = match r.class {
            ClassLabel::Nodule => true,
            ClassLabel::NonNodule => false,
            ClassLabel::Unlabeled => {
                return Err(data_err!("{}: unlabeled record in evaluation", r.id))
            }
        };
        labels.push(is_nodule);
        if let (true, Some(m)) = (is_nodule, &r.mask) {
            if m.data.len() != p.mask.len() {
                return Err(shape_err!(
                    "{}: predicted mask has {} voxels",
                    r.id,
                    p.mask.len()
                ));
            }
            dscs.push(dice_counts(&p.mask, &m.data));
        }
    }
    if dscs.is_empty() {
        return Err(Error::UndefinedMetric(
            "no masked nodule records for DSC".into(),
        ));
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.nodule_prob).collect();
    let scans: Vec<u32> = records.iter().map(|r| r.scan_id).collect();
    let sens = sensitivity(&scores, &labels, CLASS_THRESHOLD)?;
    let curve = froc(&scores, &labels, &scans)?;
    Ok(FoldMetrics {
        dsc: dscs.iter().sum::<f64>() / dscs.len() as f64,
        sensitivity: sens,
        froc_score: froc_score(&curve, &FROC_RATES),
        curve,
    })
}

/// Runs the network in inference mode over `records` in fixed-size batches.
pub fn predict_records(
    net: &MultiTaskNet,
    records: &[&CandidateRecord],
    seg_threshold: f64,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let batch = stack_patches(chunk.iter().copied())?;
        out.extend(net.predict(&batch, seg_threshold)?);
    }
    Ok(out)
}

pub fn evaluate_fold(
    net: &MultiTaskNet,
    records: &[&CandidateRecord],
    seg_threshold: f64,
) -> Result<FoldMetrics> {
    let preds = predict_records(net, records, seg_threshold)?;
    evaluate_predictions(records, &preds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub round: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_seg: f64,
    pub val_dsc: f64,
    pub val_sens: f64,
}

/// Learning-curve log; epochs strictly increase within a round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(prev) = self.rows.last() {
            if row.round < prev.round || (row.round == prev.round && row.epoch <= prev.epoch) {
                return Err(data_err!(
                    "log row (round {}, epoch {}) does not follow (round {}, epoch {})",
                    row.round,
                    row.epoch,
                    prev.round,
                    prev.epoch
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: MetricsLog) -> Result<()> {
        other.rows.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.rows.is_empty() {
            w.write_record([
                "epoch",
                "round",
                "loss_total",
                "loss_cls",
                "loss_seg",
                "val_dsc",
                "val_sens",
            ])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut log = MetricsLog::new();
        for row in rd.deserialize() {
            log.push(row?)?;
        }
        Ok(log)
    }
}
