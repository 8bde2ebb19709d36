//! Resumable training state on disk.
//!
//! A checkpoint directory holds `net.ndlw`, `adam.ndla`, `metrics.csv`,
//! the labelled pool under `pool/` and `state.toml` with the loop
//! position and the unlabelled queue. It is written to a sibling
//! directory first and then renamed into place.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{load_adam, save_adam, AdamConfig, AdamState};
use crate::data::{ClassLabel, Dataset};
use crate::error::{data_err, Error, Result};
use crate::eval::MetricsLog;
use crate::model::{load_weights, save_weights, MultiTaskNet, NetworkConfig};
use crate::semisup::{read_pool, write_pool, LoopState, RoundStats};

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    round: usize,
    epochs_done: usize,
    unlabeled: Vec<String>,
    stats: Vec<[usize; 4]>,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn save(dir: &Path, net: &MultiTaskNet, adam: &AdamState, state: &LoopState) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io(&tmp))?;
    save_weights(net, &tmp.join("net.ndlw"))?;
    save_adam(adam, &tmp.join("adam.ndla"))?;
    state.log.write_csv(&tmp.join("metrics.csv"))?;
    write_pool(&tmp.join("pool"), &state.pool)?;
    let file = StateFile {
        round: state.round,
        epochs_done: state.epochs_done,
        unlabeled: state.unlabeled.iter().map(|r| r.id.clone()).collect(),
        stats: state
            .stats
            .iter()
            .map(|s| [s.round, s.accepted, s.rejected, s.untouched])
            .collect(),
    };
    let path = tmp.join("state.toml");
    fs::write(&path, toml::to_string(&file).expect("state serializes")).map_err(io(&path))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io(dir))
}

pub fn load(
    dir: &Path,
    dataset: &Dataset,
    net_cfg: &NetworkConfig,
    adam_cfg: &AdamConfig,
) -> Result<(MultiTaskNet, AdamState, LoopState)> {
    let net = load_weights(&dir.join("net.ndlw"), net_cfg)?;
    let adam = load_adam(&dir.join("adam.ndla"), adam_cfg.clone(), net.params())?;
    let path = dir.join("state.toml");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let file: StateFile = toml::from_str(&text).map_err(|e| data_err!("{}: {}", path.display(), e.message()))?;
    let unlabeled = file
        .unlabeled
        .iter()
        .map(|id| {
            let mut r = dataset
                .get(id)
                .ok_or_else(|| data_err!("{id}: not in the dataset"))?
                .clone();
            r.class = ClassLabel::Unlabeled;
            r.mask = None;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let state = LoopState {
        round: file.round,
        epochs_done: file.epochs_done,
        pool: read_pool(&dir.join("pool"), dataset)?,
        unlabeled,
        stats: file
            .stats
            .iter()
            .map(|&[round, accepted, rejected, untouched]| RoundStats {
                round,
                accepted,
                rejected,
                untouched,
            })
            .collect(),
        log: MetricsLog::read_csv(&dir.join("metrics.csv"))?,
    };
    Ok((net, adam, state))
}
