use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
strategy = "multi-task-semisup"

[data]
folds = 2
labeled_fraction = 0.5

[synth]
n_scans = 4
nodules_per_scan = 2
nonnodules_per_scan = 2
patch_shape = [3, 8, 8]
radius_range = [1, 1]

[network]
input_shape = [3, 8, 8]
channels_per_stage = [2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2]
pool_positions = [2]
upsample_positions = [12]
skip_connections = true
fc_hidden = 4

[train]
batch_size = 4

[semisup]
rounds = 2
epochs_initial = 2
epochs_per_round = 1
"#;

fn nodulenet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodulenet"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(nodulenet(dir.path(), &["gen-data", "--config", "tiny.toml", "--out", "data", "--verify"]));
    dir
}

#[test]
fn gen_data_writes_a_verified_dataset() {
    let dir = setup();
    let data = dir.path().join("data");
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    // 16 originals plus six shifted copies of each of the 8 nodules.
    assert_eq!(manifest.lines().count(), 1 + 16 + 48);
    assert!(data.join("config.toml").exists());
    // Same seed, same bytes.
    ok(nodulenet(dir.path(), &["gen-data", "--config", "tiny.toml", "--out", "again"]));
    assert_eq!(manifest, fs::read_to_string(dir.path().join("again/manifest.csv")).unwrap());
}

#[test]
fn semisup_training_resumes_bit_identically() {
    let dir = setup();
    let base = ["train", "--config", "tiny.toml", "--data", "data"];
    ok(nodulenet(dir.path(), &[&base[..], &["--out", "full"]].concat()));
    ok(nodulenet(dir.path(), &[&base[..], &["--out", "split", "--halt-after", "3"]].concat()));
    assert!(!dir.path().join("split/weights.ndlw").exists());
    ok(nodulenet(dir.path(), &[&base[..], &["--out", "split", "--resume"]].concat()));
    for file in ["weights.ndlw", "metrics.csv", "rounds.csv", "pool/pool.csv"] {
        let a = fs::read(dir.path().join("full").join(file)).unwrap();
        let b = fs::read(dir.path().join("split").join(file)).unwrap();
        assert!(a == b, "{file} differs after resume");
    }
    let metrics = fs::read_to_string(dir.path().join("full/metrics.csv")).unwrap();
    // Two initial epochs and one per self-training round.
    assert_eq!(metrics.lines().count(), 1 + 2 + 2);
    assert!(dir.path().join("full/pools/round_1/pool.csv").exists());
}

#[test]
fn eval_pseudo_label_and_plot() {
    let dir = setup();
    ok(nodulenet(dir.path(), &["train", "--config", "tiny.toml", "--data", "data", "--out", "run"]));
    let out = ok(nodulenet(
        dir.path(),
        &["eval", "--config", "tiny.toml", "--data", "data", "--weights", "run/weights.ndlw", "--out", "ev"],
    ));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FROC score"));
    let eval = fs::read_to_string(dir.path().join("ev/eval.csv")).unwrap();
    assert!(eval.starts_with("fold,records,dsc,sensitivity,froc_score\n0,"));
    assert!(dir.path().join("ev/froc.csv").exists());

    ok(nodulenet(
        dir.path(),
        &["pseudo-label", "--config", "tiny.toml", "--data", "data", "--weights", "run/weights.ndlw", "--out", "pl"],
    ));
    let pool = fs::read_to_string(dir.path().join("pl/pool.csv")).unwrap();
    let rejected = fs::read_to_string(dir.path().join("pl/rejected.csv")).unwrap();
    assert!(pool.lines().count() + rejected.lines().count() > 2);

    ok(nodulenet(dir.path(), &["plot", "run/metrics.csv", "ev/froc.csv", "--out", "plots"]));
    let svg = fs::read_to_string(dir.path().join("plots/froc.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(dir.path().join("plots/learning_curve.svg").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nodulenet(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(nodulenet(dir.path(), &["bogus"]).status.code(), Some(1));
    fs::write(dir.path().join("bad.toml"), "[network]\nbn_eps = -1.0\n").unwrap();
    assert_eq!(nodulenet(dir.path(), &["gen-data", "--config", "bad.toml"]).status.code(), Some(1));
    fs::write(dir.path().join("unknown.toml"), "colour = 1\n").unwrap();
    assert_eq!(nodulenet(dir.path(), &["gen-data", "--config", "unknown.toml"]).status.code(), Some(1));
    let out = nodulenet(dir.path(), &["train", "--data", "missing", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("x.csv"), "a,b\n1,2\n").unwrap();
    assert_eq!(nodulenet(dir.path(), &["plot", "x.csv", "--out", "p"]).status.code(), Some(2));
}
