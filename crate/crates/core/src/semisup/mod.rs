//! Supervised training and the self-training loop that grows the labelled
//! pool with the network's own predictions.

mod pool;

pub use pool::{read_pool, write_pool, LabeledPool, Origin, PoolEntry, POOL_MANIFEST};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step_lrs, AdamState};
use crate::data::{stack_masks, stack_patches, CandidateRecord, ClassLabel, Provenance, Volume};
use crate::error::{config_err, data_err, Error, Result};
use crate::eval::{evaluate_fold, predict_records, MetricsLog, MetricsRow, CLASS_THRESHOLD};
use crate::losses::{
    cross_entropy_class, cross_entropy_voxel, multi_task_loss, MultiTaskLossConfig,
};
use crate::model::{MultiTaskNet, Part};
use crate::tensor::{BatchNormMode, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Voxel probability at which predicted masks are binarized.
    pub seg_threshold: f64,
    /// Whether non-nodule records contribute their all-zero masks to the
    /// segmentation loss.
    pub seg_loss_on_negatives: bool,
    /// Learning rate of epoch `e` (1-based) is `lr * lr_decay^(e - 1)`.
    pub lr_decay: f64,
    /// Multiplies the learning rate of the classification head. The head's
    /// first dense layer sees every voxel of the fork map, so Adam's
    /// unit-size steps move its outputs far more than a conv layer's.
    pub cls_head_lr_scale: f64,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            seg_threshold: 0.5,
            seg_loss_on_negatives: true,
            lr_decay: 1.0,
            cls_head_lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if !(self.seg_threshold > 0.0 && self.seg_threshold < 1.0) {
            return Err(config_err!(
                "seg_threshold must lie in (0, 1), got {}",
                self.seg_threshold
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(config_err!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.cls_head_lr_scale > 0.0 && self.cls_head_lr_scale.is_finite()) {
            return Err(config_err!(
                "cls_head_lr_scale must be positive, got {}",
                self.cls_head_lr_scale
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupConfig {
    /// Fraction of the remaining unlabelled records pseudo-labelled per round.
    pub chunk_fraction: f64,
    pub rounds: usize,
    pub epochs_initial: usize,
    pub epochs_per_round: usize,
    /// Minimum `max(p, 1 - p)` for a pseudo-label to be accepted; 0 accepts all.
    pub confidence_floor: f64,
    /// Drives the order in which unlabelled records are visited.
    pub seed: u64,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        SemiSupConfig {
            chunk_fraction: 0.25,
            rounds: 4,
            epochs_initial: 30,
            epochs_per_round: 10,
            confidence_floor: 0.0,
            seed: 0,
        }
    }
}

impl SemiSupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_fraction > 0.0 && self.chunk_fraction <= 1.0) {
            return Err(config_err!(
                "chunk_fraction must lie in (0, 1], got {}",
                self.chunk_fraction
            ));
        }
        if self.rounds == 0 {
            return Err(config_err!("rounds must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.confidence_floor) {
            return Err(config_err!(
                "confidence_floor must lie in [0, 1), got {}",
                self.confidence_floor
            ));
        }
        Ok(())
    }
}

/// Everything a training run needs besides the network and its optimizer.
pub struct Setup<'a> {
    pub loss: &'a MultiTaskLossConfig,
    pub train: &'a TrainConfig,
    /// Held-out, manually labelled records scored after every epoch.
    pub validation: &'a [&'a CandidateRecord],
}

fn shuffle_rng(seed: u64, round: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round as u64) << 32) | epoch as u64);
    rng
}

/// One optimizer step; returns `(total, class, segmentation)` losses.
fn train_step(
    net: &mut MultiTaskNet,
    adam: &mut AdamState,
    batch: &[&CandidateRecord],
    setup: &Setup,
    lr: f64,
) -> Result<[f64; 3]> {
    let labels = batch
        .iter()
        .map(|r| {
            r.class
                .index()
                .ok_or_else(|| data_err!("{}: training record has no class", r.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let x = stack_patches(batch.iter().copied())?;
    let (target, mut weights) = stack_masks(batch.iter().copied())?;
    if !setup.train.seg_loss_on_negatives {
        for (w, r) in weights.iter_mut().zip(batch) {
            if r.class == ClassLabel::NonNodule {
                *w = 0.0;
            }
        }
    }
    let eps = setup.loss.clamp_eps;
    let mut g = Graph::new();
    let input = g.input(x);
    let fv = net.record(&mut g, input, BatchNormMode::Train)?;
    let out = (|| -> Result<[f64; 3]> {
        let lc = cross_entropy_class(&mut g, fv.class_probs, &labels, eps)?;
        let ls = cross_entropy_voxel(&mut g, fv.seg_probs, &target, Some(&weights), eps)?;
        let total = multi_task_loss(&mut g, lc, ls, &fv.params, setup.loss)?;
        g.value(total).check_finite("training loss")?;
        g.backward(total)?;
        Ok([
            g.value(total).item(),
            g.value(lc).item(),
            g.value(ls).item(),
        ])
    })();
    net.reclaim(&mut g, &fv)?;
    let losses = out?;
    for (i, p) in net.params().iter().enumerate() {
        let silent = match net.part_of(i) {
            Part::SegHead => setup.loss.weight_seg == 0.0,
            Part::ClsHead => setup.loss.weight_cls == 0.0,
            Part::Trunk => false,
        };
        if silent && p.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
            return Err(Error::Numeric(format!(
                "{} received gradient from a task with weight 0",
                net.param_names()[i]
            )));
        }
    }
    let lrs: Vec<f64> = (0..net.params().len())
        .map(|i| match net.part_of(i) {
            Part::ClsHead => lr * setup.train.cls_head_lr_scale,
            _ => lr,
        })
        .collect();
    adam_step_lrs(net.params_mut(), adam, &lrs)?;
    net.params_mut().iter_mut().for_each(|p| p.reset_grad());
    Ok(losses)
}

/// Trains for epochs `first..=last` of `round` on every pool record,
/// calling `after_epoch` with each finished epoch's log row.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    net: &mut MultiTaskNet,
    adam: &mut AdamState,
    pool: &LabeledPool,
    setup: &Setup,
    round: usize,
    first: usize,
    last: usize,
    after_epoch: &mut dyn FnMut(&MultiTaskNet, &AdamState, &MetricsRow) -> Result<()>,
) -> Result<MetricsLog> {
    setup.train.validate()?;
    setup.loss.validate()?;
    let mut log = MetricsLog::new();
    if first > last {
        return Ok(log);
    }
    if pool.is_empty() {
        return Err(data_err!("training set is empty"));
    }
    let ids = pool.ids();
    if let Some(r) = setup
        .validation
        .iter()
        .find(|r| ids.contains(r.id.as_str()))
    {
        return Err(data_err!(
            "{}: validation record is also a training record",
            r.id
        ));
    }
    let records: Vec<&CandidateRecord> = pool.records().collect();
    for epoch in first..=last {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut shuffle_rng(setup.train.seed, round, epoch));
        let lr = adam.config.lr * setup.train.lr_decay.powi(epoch as i32 - 1);
        let mut sums = [0.0; 3];
        for chunk in order.chunks(setup.train.batch_size) {
            let batch: Vec<&CandidateRecord> = chunk.iter().map(|&i| records[i]).collect();
            let l = train_step(net, adam, &batch, setup, lr)?;
            for (s, v) in sums.iter_mut().zip(l) {
                *s += v * batch.len() as f64;
            }
        }
        let n = records.len() as f64;
        let (val_dsc, val_sens) = if setup.validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = evaluate_fold(net, setup.validation, setup.train.seg_threshold)?;
            (m.dsc, m.sensitivity)
        };
        let row = MetricsRow {
            epoch,
            round,
            loss_total: sums[0] / n,
            loss_cls: sums[1] / n,
            loss_seg: sums[2] / n,
            val_dsc,
            val_sens,
        };
        log.push(row)?;
        log::info!(
            "round {round} epoch {epoch}: loss {:.4} (cls {:.4}, seg {:.4}) val dsc {:.4} sens {:.4}",
            row.loss_total,
            row.loss_cls,
            row.loss_seg,
            val_dsc,
            val_sens
        );
        after_epoch(net, adam, &row)?;
    }
    Ok(log)
}

/// Trains `epochs` epochs on the pool, logging them as round 0.
pub fn train_supervised(
    net: &mut MultiTaskNet,
    adam: &mut AdamState,
    pool: &LabeledPool,
    setup: &Setup,
    epochs: usize,
) -> Result<MetricsLog> {
    train_epochs(net, adam, pool, setup, 0, 1, epochs, &mut |_, _, _| Ok(()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabels {
    /// Records with predicted class and mask, provenance `pseudo`.
    pub accepted: Vec<CandidateRecord>,
    /// Records whose prediction was not confident enough, unchanged.
    pub rejected: Vec<CandidateRecord>,
}

/// Labels `unlabeled` with the network's predictions. Predicted non-nodules
/// get an all-zero mask.
pub fn pseudo_label(
    net: &MultiTaskNet,
    unlabeled: Vec<CandidateRecord>,
    seg_threshold: f64,
    confidence_floor: f64,
) -> Result<PseudoLabels> {
    let refs: Vec<&CandidateRecord> = unlabeled.iter().collect();
    let preds = predict_records(net, &refs, seg_threshold)?;
    let mut out = PseudoLabels::default();
    for (mut r, p) in unlabeled.into_iter().zip(preds) {
        if p.nodule_prob.max(1.0 - p.nodule_prob) < confidence_floor {
            out.rejected.push(r);
            continue;
        }
        r.class = if p.nodule_prob >= CLASS_THRESHOLD {
            ClassLabel::Nodule
        } else {
            ClassLabel::NonNodule
        };
        let mut mask = Volume::new(r.patch.shape, p.mask)?;
        if r.class == ClassLabel::NonNodule {
            mask.data.fill(0);
        }
        r.mask = Some(mask);
        r.provenance = Provenance::Pseudo;
        out.accepted.push(r);
    }
    Ok(out)
}

/// Bookkeeping of one pseudo-labelling round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundStats {
    pub round: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Unlabelled records not visited this round.
    pub untouched: usize,
}

/// Resumable state of the self-training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopState {
    pub round: usize,
    /// Epochs of the current round already trained.
    pub epochs_done: usize,
    pub pool: LabeledPool,
    /// Records still waiting for a pseudo-label, in visiting order.
    pub unlabeled: Vec<CandidateRecord>,
    pub stats: Vec<RoundStats>,
    pub log: MetricsLog,
}

impl LoopState {
    /// Start of a run. The unlabelled records are visited in a seeded
    /// random order.
    pub fn new(
        pool: LabeledPool,
        mut unlabeled: Vec<CandidateRecord>,
        cfg: &SemiSupConfig,
    ) -> Self {
        unlabeled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        LoopState {
            round: 0,
            epochs_done: 0,
            pool,
            unlabeled,
            stats: Vec::new(),
            log: MetricsLog::new(),
        }
    }
}

/// When [`run_loop`] calls its checkpoint hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    EpochEnd,
    RoundStart,
}

/// Runs the loop from `state` to completion: training to the epoch count
/// of the current round, then pseudo-labelling a slice of the unlabelled
/// records, until `rounds` rounds have run or nothing is left to label.
pub fn run_loop(
    net: &mut MultiTaskNet,
    adam: &mut AdamState,
    state: &mut LoopState,
    cfg: &SemiSupConfig,
    setup: &Setup,
    checkpoint: &mut dyn FnMut(&MultiTaskNet, &AdamState, &LoopState, Event) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if state.pool.is_empty() {
        return Err(data_err!("labelled pool is empty"));
    }
    loop {
        let target = if state.round == 0 {
            cfg.epochs_initial
        } else {
            cfg.epochs_per_round
        };
        for epoch in state.epochs_done + 1..=target {
            let log = train_epochs(
                net,
                adam,
                &state.pool,
                setup,
                state.round,
                epoch,
                epoch,
                &mut |_, _, _| Ok(()),
            )?;
            state.log.extend(log)?;
            state.epochs_done = epoch;
            checkpoint(net, adam, state, Event::EpochEnd)?;
        }
        if state.round == cfg.rounds || state.unlabeled.is_empty() {
            return Ok(());
        }
        let before = state.unlabeled.len();
        let take = ((cfg.chunk_fraction * before as f64).ceil() as usize).clamp(1, before);
        let rest = state.unlabeled.split_off(take);
        let chunk = std::mem::replace(&mut state.unlabeled, rest);
        let labels = pseudo_label(net, chunk, setup.train.seg_threshold, cfg.confidence_floor)?;
        state.round += 1;
        state.epochs_done = 0;
        state.stats.push(RoundStats {
            round: state.round,
            accepted: labels.accepted.len(),
            rejected: labels.rejected.len(),
            untouched: before - take,
        });
        log::info!(
            "round {}: accepted {}, rejected {}, {} left",
            state.round,
            labels.accepted.len(),
            labels.rejected.len(),
            before - take
        );
        for record in labels.accepted {
            state.pool.push(PoolEntry {
                record,
                origin: Origin::Pseudo { round: state.round },
            })?;
        }
        state.unlabeled.extend(labels.rejected);
        checkpoint(net, adam, state, Event::RoundStart)?;
    }
}

/// Self-training from scratch; returns the log and the final loop state.
pub fn semi_supervised_train(
    net: &mut MultiTaskNet,
    adam: &mut AdamState,
    labeled: LabeledPool,
    unlabeled: Vec<CandidateRecord>,
    cfg: &SemiSupConfig,
    setup: &Setup,
) -> Result<LoopState> {
    let mut state = LoopState::new(labeled, unlabeled, cfg);
    run_loop(net, adam, &mut state, cfg, setup, &mut |_, _, _, _| Ok(()))?;
    Ok(state)
}

/// Splits records into a labelled part holding `fraction` of each class
/// and an unlabelled part stripped of class and mask. Augmented variants
/// go wherever their parent goes.
pub fn split_labeled(
    records: Vec<CandidateRecord>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<CandidateRecord>, Vec<CandidateRecord>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(config_err!("labelled fraction must lie in [0, 1], got {fraction}"));
    }
    let group = |r: &CandidateRecord| r.parent_id().unwrap_or(&r.id).to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = HashSet::new();
    for class in [ClassLabel::Nodule, ClassLabel::NonNodule] {
        let mut parents: Vec<String> = records
            .iter()
            .filter(|r| r.class == class && r.parent_id().is_none())
            .map(|r| r.id.clone())
            .collect();
        parents.shuffle(&mut rng);
        let n = (fraction * parents.len() as f64).round() as usize;
        keep.extend(parents.into_iter().take(n));
    }
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for mut r in records {
        if keep.contains(&group(&r)) {
            r.provenance = Provenance::Manual;
            labeled.push(r);
        } else {
            r.class = ClassLabel::Unlabeled;
            r.mask = None;
            unlabeled.push(r);
        }
    }
    Ok((labeled, unlabeled))
}
