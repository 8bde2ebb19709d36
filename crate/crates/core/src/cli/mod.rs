//! Command-line front end: data generation, training, pseudo-labelling,
//! evaluation and plotting.

mod checkpoint;
mod config;
pub mod plot;

pub use config::{DataConfig, RunConfig, Strategy};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adam::AdamState;
use crate::data::{
    balance_by_augmentation, check_invariants, generate_synthetic, kfold_split, read_dataset,
    write_dataset, CandidateRecord, Dataset, FoldSplit,
};
use crate::error::{data_err, Error, Result};
use crate::eval::{evaluate_fold, FrocCurve, MetricsLog};
use crate::model::{load_weights, save_weights, MultiTaskNet};
use crate::semisup::{
    pseudo_label, run_loop, split_labeled, write_pool, Event, LabeledPool, LoopState, Origin,
    PoolEntry, Setup,
};

#[derive(Debug, Parser)]
#[command(name = "nodulenet", version, about = "Multi-task 3D CNN for nodule candidates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, augment and split a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Read the dataset back and re-check every invariant.
        #[arg(long)]
        verify: bool,
    },
    /// Train with the configured strategy.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs, leaving a checkpoint behind.
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Label the unlabelled training records with a trained network.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a trained network on one fold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fold to score (defaults to `data.val_fold`).
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Render metrics and FROC CSV files as SVG charts.
    Plot {
        #[command(flatten)]
        common: Common,
        /// `metrics.csv` or `froc.csv` files; one series each.
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let cfg = cfg.effective()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok((cfg, out))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, verify } => {
            let (cfg, out) = resolve(&common)?;
            gen_data(&cfg, &out, verify)
        }
        Command::Train {
            common,
            data,
            resume,
            halt_after,
        } => {
            let (cfg, out) = resolve(&common)?;
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            train(&cfg, &data, &out, resume, halt_after)
        }
        Command::PseudoLabel {
            common,
            weights,
            data,
        } => {
            let (cfg, out) = resolve(&common)?;
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            pseudo(&cfg, &weights, &data, &out)
        }
        Command::Eval {
            common,
            weights,
            data,
            fold,
        } => {
            let (cfg, out) = resolve(&common)?;
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            eval(&cfg, &weights, &data, &out, fold.unwrap_or(cfg.data.val_fold))
        }
        Command::Plot { common, csv } => {
            let (_, out) = resolve(&common)?;
            plot_files(&csv, &out)
        }
    }
}

/// Generates the configured dataset with its fold split.
pub fn build_dataset(cfg: &RunConfig) -> Result<(Dataset, FoldSplit)> {
    let mut ds = generate_synthetic(&cfg.synth)?;
    if cfg.data.augment {
        ds = balance_by_augmentation(&ds)?;
    }
    let split = kfold_split(&ds, cfg.data.folds, cfg.seed)?;
    Ok((ds, split))
}

fn gen_data(cfg: &RunConfig, out: &Path, verify: bool) -> Result<()> {
    let (ds, split) = build_dataset(cfg)?;
    write_dataset(out, &ds, Some(&split))?;
    cfg.write_effective(out)?;
    log::info!("wrote {} records to {}", ds.len(), out.display());
    if verify {
        let (back, back_split) = read_dataset(out)?;
        let mut bad = check_invariants(&back, back_split.as_ref());
        if back != ds {
            bad.push("dataset read back differs from the generated one".into());
        }
        if back_split.as_ref() != Some(&split) {
            bad.push("fold split read back differs from the generated one".into());
        }
        if !bad.is_empty() {
            return Err(data_err!("{} invariant violations: {}", bad.len(), bad.join("; ")));
        }
        log::info!("verified {} records", back.len());
    }
    Ok(())
}

/// Training records (all but `fold`) and validation records (`fold`
/// without augmented variants).
pub fn partition(ds: &Dataset, split: &FoldSplit, fold: usize) -> (Vec<CandidateRecord>, Vec<CandidateRecord>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in &ds.records {
        if split.fold_of(&r.id) == Some(fold) {
            if r.parent_id().is_none() {
                val.push(r.clone());
            }
        } else {
            train.push(r.clone());
        }
    }
    (train, val)
}

fn load_split(data: &Path) -> Result<(Dataset, FoldSplit)> {
    let (ds, split) = read_dataset(data)?;
    let split = split.ok_or_else(|| data_err!("{}: manifest has no fold column", data.display()))?;
    Ok((ds, split))
}

/// Labelled and unlabelled training records for `cfg`.
fn training_sets(cfg: &RunConfig, train: Vec<CandidateRecord>) -> Result<(Vec<CandidateRecord>, Vec<CandidateRecord>)> {
    if cfg.data.labeled_fraction < 1.0 {
        split_labeled(train, cfg.data.labeled_fraction, cfg.seed)
    } else {
        Ok((train, Vec::new()))
    }
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool, halt_after: Option<usize>) -> Result<()> {
    let (ds, split) = load_split(data)?;
    let (train_recs, val) = partition(&ds, &split, cfg.data.val_fold);
    let val_refs: Vec<&CandidateRecord> = val.iter().collect();
    let loss = cfg.strategy.loss(&cfg.loss);
    let setup = Setup {
        loss: &loss,
        train: &cfg.train,
        validation: &val_refs,
    };
    cfg.write_effective(out)?;
    let ckpt = out.join("checkpoint");
    let (mut net, mut adam, mut state) = if resume && ckpt.exists() {
        log::info!("resuming from {}", ckpt.display());
        checkpoint::load(&ckpt, &ds, &cfg.network, &cfg.adam)?
    } else {
        let (labeled, unlabeled) = training_sets(cfg, train_recs)?;
        let unlabeled = if cfg.strategy == Strategy::MultiTaskSemisup {
            unlabeled
        } else {
            Vec::new()
        };
        let net = MultiTaskNet::new(&cfg.network)?;
        let adam = AdamState::new(cfg.adam.clone(), net.params());
        let state = LoopState::new(LabeledPool::manual(labeled)?, unlabeled, &cfg.semisup);
        (net, adam, state)
    };
    let mut epochs = 0;
    let mut halted = false;
    let result = run_loop(&mut net, &mut adam, &mut state, &cfg.semisup, &setup, &mut |net, adam, state, event| {
        checkpoint::save(&ckpt, net, adam, state)?;
        match event {
            Event::RoundStart => write_pool(&out.join(format!("pools/round_{}", state.round)), &state.pool),
            Event::EpochEnd => {
                epochs += 1;
                if halt_after == Some(epochs) {
                    halted = true;
                    return Err(Error::Usage("halted".into()));
                }
                Ok(())
            }
        }
    });
    if halted {
        log::info!("halted after {epochs} epochs; checkpoint in {}", ckpt.display());
        return Ok(());
    }
    result?;
    save_weights(&net, &out.join("weights.ndlw"))?;
    state.log.write_csv(&out.join("metrics.csv"))?;
    write_pool(&out.join("pool"), &state.pool)?;
    write_round_stats(&out.join("rounds.csv"), &state)?;
    if let Some(r) = state.log.last() {
        log::info!("final validation DSC {:.4}, sensitivity {:.4}", r.val_dsc, r.val_sens);
    }
    Ok(())
}

fn write_round_stats(path: &Path, state: &LoopState) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "accepted", "rejected", "untouched", "pool_size"])?;
    for s in &state.stats {
        let pool = state
            .pool
            .entries()
            .iter()
            .filter(|e| match e.origin {
                Origin::Manual => true,
                Origin::Pseudo { round } => round <= s.round,
            })
            .count();
        w.write_record([s.round, s.accepted, s.rejected, s.untouched, pool].map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn pseudo(cfg: &RunConfig, weights: &Path, data: &Path, out: &Path) -> Result<()> {
    let net = load_weights(weights, &cfg.network)?;
    let (ds, split) = load_split(data)?;
    let (train_recs, _) = partition(&ds, &split, cfg.data.val_fold);
    let (_, unlabeled) = training_sets(cfg, train_recs)?;
    let labels = pseudo_label(&net, unlabeled, cfg.train.seg_threshold, cfg.semisup.confidence_floor)?;
    let mut pool = LabeledPool::default();
    for record in labels.accepted {
        pool.push(PoolEntry {
            record,
            origin: Origin::Pseudo { round: 1 },
        })?;
    }
    write_pool(out, &pool)?;
    let path = out.join("rejected.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id"])?;
    for r in &labels.rejected {
        w.write_record([&r.id])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    cfg.write_effective(out)?;
    log::info!("accepted {}, rejected {}", pool.len(), labels.rejected.len());
    Ok(())
}

fn eval(cfg: &RunConfig, weights: &Path, data: &Path, out: &Path, fold: usize) -> Result<()> {
    let net = load_weights(weights, &cfg.network)?;
    let (ds, split) = load_split(data)?;
    let (_, val) = partition(&ds, &split, fold);
    let refs: Vec<&CandidateRecord> = val.iter().collect();
    let m = evaluate_fold(&net, &refs, cfg.train.seg_threshold)?;
    let path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["fold", "records", "dsc", "sensitivity", "froc_score"])?;
    w.write_record([
        fold.to_string(),
        refs.len().to_string(),
        m.dsc.to_string(),
        m.sensitivity.to_string(),
        m.froc_score.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    m.curve.write_csv(&out.join("froc.csv"))?;
    cfg.write_effective(out)?;
    println!(
        "fold {fold}: DSC {:.4}  sensitivity {:.4}  FROC score {:.4}",
        m.dsc, m.sensitivity, m.froc_score
    );
    Ok(())
}

fn series_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) => format!("{}/{stem}", dir.to_string_lossy()),
        None => stem,
    }
}

fn plot_files(files: &[PathBuf], out: &Path) -> Result<()> {
    let mut curves = Vec::new();
    let mut frocs = Vec::new();
    for f in files {
        let mut rd = csv::Reader::from_path(f)?;
        let headers = rd.headers()?.clone();
        let name = series_name(f);
        if headers.iter().any(|h| h == "val_dsc") {
            curves.push((name, MetricsLog::read_csv(f)?));
        } else if headers.iter().any(|h| h == "fp_per_scan") {
            let points = FrocCurve::read_csv(f, 1)
                .map_err(|e| data_err!("{}: {e}", f.display()))?
                .points;
            frocs.push((name, points));
        } else {
            return Err(data_err!("{}: neither a metrics log nor a FROC curve", f.display()));
        }
    }
    let mut outputs = Vec::new();
    if !curves.is_empty() {
        outputs.push(("learning_curve.svg", plot::learning_curve_svg(&curves)?));
    }
    if !frocs.is_empty() {
        outputs.push(("froc.svg", plot::froc_svg(&frocs)?));
    }
    for (name, svg) in outputs {
        let path = out.join(name);
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
