//! Whole-network checks: end-to-end gradients, head independence, loss
//! additivity, parameter counts and deterministic training.

mod common;

use common::{network_loss, random_batch, rel_err, tiny_network, FD_STEP};
use nodulenet::adam::{AdamConfig, AdamState};
use nodulenet::losses::MultiTaskLossConfig;
use nodulenet::model::{MultiTaskNet, NetworkConfig, Part};
use rand::Rng;

fn sample_entries(net: &MultiTaskNet, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = common::rng(seed);
    let mut picked = Vec::new();
    // Cover every part of the network before sampling freely.
    for part in [Part::Trunk, Part::SegHead, Part::ClsHead] {
        let tensors: Vec<usize> = (0..net.params().len()).filter(|&i| net.part_of(i) == part).collect();
        let t = tensors[r.gen_range(0..tensors.len())];
        picked.push((t, r.gen_range(0..net.params()[t].numel())));
    }
    while picked.len() < n {
        let t = r.gen_range(0..net.params().len());
        let e = (t, r.gen_range(0..net.params()[t].numel()));
        if !picked.contains(&e) {
            picked.push(e);
        }
    }
    picked
}

fn end_to_end(skip: bool) {
    let cfg = tiny_network(skip);
    let net = MultiTaskNet::new(&cfg).unwrap();
    let batch = random_batch(&cfg, 4, 5);
    let loss = MultiTaskLossConfig {
        lambda: 1e-3,
        ..Default::default()
    };
    let (_, base, grads) = network_loss(&net, &batch, &loss, true);
    let (mut checked, mut worst) = (0, 0.0f64);
    for (t, j) in sample_entries(&net, 20, 9) {
        let eval = |d: f64| {
            let mut n = net.clone();
            n.params_mut()[t].data_mut()[j] += d;
            network_loss(&n, &batch, &loss, false)
        };
        let ((fp, pp, _), (fm, pm, _)) = (eval(FD_STEP), eval(-FD_STEP));
        if pp != base || pm != base {
            continue;
        }
        worst = worst.max(rel_err(grads[t][j], (fp - fm) / (2.0 * FD_STEP)));
        checked += 1;
    }
    assert!(checked >= 15, "only {checked} entries away from kinks");
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}

#[test]
fn end_to_end_gradients() {
    end_to_end(false);
}

#[test]
fn end_to_end_gradients_with_skips() {
    end_to_end(true);
}

#[test]
fn heads_are_independent() {
    let cfg = tiny_network(true);
    let net = MultiTaskNet::new(&cfg).unwrap();
    let batch = random_batch(&cfg, 2, 1);
    let (cls, seg) = net.forward(&batch.x).unwrap();
    for part in [Part::SegHead, Part::ClsHead] {
        let mut n = net.clone();
        for i in 0..n.params().len() {
            if n.part_of(i) == part {
                n.params_mut()[i].data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 0.1);
            }
        }
        let (c2, s2) = n.forward(&batch.x).unwrap();
        match part {
            Part::SegHead => assert_eq!(cls.data(), c2.data()),
            _ => assert_eq!(seg.data(), s2.data()),
        }
    }
    // A task with weight 0 sends exactly zero gradient into its head.
    for (w_cls, w_seg, silent) in [(1.0, 0.0, Part::SegHead), (0.0, 1.0, Part::ClsHead)] {
        let loss = MultiTaskLossConfig {
            weight_cls: w_cls,
            weight_seg: w_seg,
            ..Default::default()
        };
        let (_, _, grads) = network_loss(&net, &batch, &loss, true);
        for (i, g) in grads.iter().enumerate() {
            if net.part_of(i) == silent {
                assert!(g.iter().all(|&v| v == 0.0), "{}", net.param_names()[i]);
            }
        }
    }
}

#[test]
fn trunk_gradient_is_the_sum_of_task_gradients() {
    let cfg = tiny_network(true);
    let net = MultiTaskNet::new(&cfg).unwrap();
    let batch = random_batch(&cfg, 4, 2);
    let with = |w_cls, w_seg| {
        let loss = MultiTaskLossConfig {
            weight_cls: w_cls,
            weight_seg: w_seg,
            lambda: 0.0,
            ..Default::default()
        };
        network_loss(&net, &batch, &loss, true).2
    };
    let (both, cls, seg) = (with(1.0, 1.0), with(1.0, 0.0), with(0.0, 1.0));
    for i in 0..both.len() {
        for j in 0..both[i].len() {
            let d = (both[i][j] - cls[i][j] - seg[i][j]).abs();
            assert!(d < 1e-10, "{}[{j}]: {d:e}", net.param_names()[i]);
        }
    }
}

#[test]
fn class_probabilities_sum_to_one() {
    let cfg = tiny_network(false);
    let net = MultiTaskNet::new(&cfg).unwrap();
    let batch = random_batch(&cfg, 6, 3);
    let (cls, seg) = net.forward(&batch.x).unwrap();
    for row in cls.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    assert!(seg.data().iter().all(|p| (0.0..=1.0).contains(p)));
}

/// Independent count of weights: conv kernels and biases, batch-norm scale
/// and shift, the two fully connected layers.
fn count_parameters(cfg: &NetworkConfig) -> usize {
    let conv = |cin: usize, cout: usize| cout * cin * 27 + cout;
    let bn = |c: usize| 2 * c;
    let mut total = 0;
    let mut cin = 1;
    let mut saved = Vec::new();
    let mut xy = cfg.input_shape[1] * cfg.input_shape[2];
    for (k, &c) in cfg.channels_per_stage.iter().enumerate() {
        let layer = k + 1;
        total += conv(cin, c) + bn(c);
        cin = c;
        if cfg.pool_positions.contains(&layer) {
            saved.push(c);
            xy /= 4;
        }
        if cfg.upsample_positions.contains(&layer) {
            xy *= 4;
            if cfg.skip_connections {
                cin += saved.pop().unwrap();
            }
        }
    }
    let voxels = cfg.input_shape[0] * xy;
    total += conv(cin, 1);
    total += conv(cin, cfg.cls_head_channels) + bn(cfg.cls_head_channels);
    total += cfg.cls_head_channels * voxels * cfg.fc_hidden + cfg.fc_hidden;
    total += cfg.fc_hidden * 2 + 2;
    total
}

#[test]
fn parameter_counts_match_an_independent_tally() {
    for skip in [false, true] {
        for cfg in [
            tiny_network(skip),
            NetworkConfig {
                skip_connections: skip,
                ..Default::default()
            },
        ] {
            let net = MultiTaskNet::new(&cfg).unwrap();
            let stored: usize = net.params().iter().map(|p| p.numel()).sum();
            assert_eq!(stored, count_parameters(&cfg));
            assert_eq!(cfg.parameter_count(), count_parameters(&cfg));
        }
    }
}

#[test]
fn training_is_deterministic() {
    use nodulenet::data::{generate_synthetic, SynthConfig};
    use nodulenet::semisup::{train_supervised, LabeledPool, Setup, TrainConfig};
    let cfg = tiny_network(true);
    let ds = generate_synthetic(&SynthConfig {
        n_scans: 2,
        nodules_per_scan: 3,
        nonnodules_per_scan: 3,
        patch_shape: cfg.input_shape,
        radius_range: [1, 1],
        ..Default::default()
    })
    .unwrap();
    let loss = MultiTaskLossConfig::default();
    let train = TrainConfig {
        batch_size: 4,
        ..Default::default()
    };
    let run = || {
        let mut net = MultiTaskNet::new(&cfg).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), net.params());
        let pool = LabeledPool::manual(ds.records.clone()).unwrap();
        let setup = Setup {
            loss: &loss,
            train: &train,
            validation: &[],
        };
        let log = train_supervised(&mut net, &mut adam, &pool, &setup, 3).unwrap();
        (net.to_bytes(), log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert!(a == b);
    let rows = |l: &nodulenet::eval::MetricsLog| {
        l.rows().iter().map(|r| [r.loss_total, r.loss_cls, r.loss_seg]).collect::<Vec<_>>()
    };
    assert_eq!(rows(&la), rows(&lb));
}
