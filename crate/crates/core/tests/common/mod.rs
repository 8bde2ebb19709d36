//! Shared test oracles. Nothing here calls into the analytic backward pass
//! except to obtain the value being checked.
#![allow(dead_code)]

pub mod primitives;

use nodulenet::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every element of every input. Entries whose +h / -h evaluations
/// land on a different side of a kink than the base point are skipped.
pub fn check_grads(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> GradReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let base_pattern = g.activation_pattern();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(|s| s.to_vec())
                .unwrap_or(vec![0.0; t.numel()])
        })
        .collect();

    let eval = |ti: usize, j: usize, delta: f64| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut t = t.clone();
                if k == ti {
                    t.data_mut()[j] += delta;
                }
                g.param(t)
            })
            .collect();
        let loss = build(&mut g, &vars);
        (g.value(loss).item(), g.activation_pattern())
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let (fp, pp) = eval(ti, j, FD_STEP);
            let (fm, pm) = eval(ti, j, -FD_STEP);
            if pp != base_pattern || pm != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[ti][j], numeric));
            report.checked += 1;
        }
    }
    report
}

/// `sum(out * weights)` with fixed random weights, so every output
/// element contributes a distinct upstream gradient.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = uniform(&mut rng(seed), &shape, -1.0, 1.0);
    let wv = g.input(w);
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

use nodulenet::losses::{cross_entropy_class, cross_entropy_voxel, multi_task_loss, MultiTaskLossConfig};
use nodulenet::model::{MultiTaskNet, NetworkConfig};
use nodulenet::tensor::{ActivationPattern, BatchNormMode};

/// Full 14-layer trunk with two channels per layer on `3 x 8 x 8` patches.
pub fn tiny_network(skip: bool) -> NetworkConfig {
    NetworkConfig {
        input_shape: [3, 8, 8],
        channels_per_stage: vec![2; 14],
        pool_positions: vec![2, 4],
        upsample_positions: vec![10, 12],
        skip_connections: skip,
        fc_hidden: 4,
        ..Default::default()
    }
}

/// A batch of random patches, class labels and masks for `cfg`.
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub mask: Tensor,
    pub weights: Vec<f64>,
}

pub fn random_batch(cfg: &NetworkConfig, n: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let [z, y, x] = cfg.input_shape;
    let shape = [n, 1, z, y, x];
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mask = Tensor::new(
        &shape,
        (0..n * z * y * x)
            .map(|i| f64::from(u8::from(labels[i / (z * y * x)] == 1 && r.gen_bool(0.3))))
            .collect(),
    )
    .unwrap();
    Batch {
        x: uniform(&mut r, &shape, 0.0, 1.0),
        labels,
        mask,
        weights: vec![1.0; n],
    }
}

/// Training-mode loss of `net` on `batch`, the activation pattern of the
/// pass and, when `grads` is set, every parameter gradient.
pub fn network_loss(
    net: &MultiTaskNet,
    batch: &Batch,
    loss: &MultiTaskLossConfig,
    grads: bool,
) -> (f64, ActivationPattern, Vec<Vec<f64>>) {
    let mut net = net.clone();
    let mut g = Graph::new();
    let input = g.input(batch.x.clone());
    let fv = net.record(&mut g, input, BatchNormMode::Train).unwrap();
    let lc = cross_entropy_class(&mut g, fv.class_probs, &batch.labels, loss.clamp_eps).unwrap();
    let ls = cross_entropy_voxel(&mut g, fv.seg_probs, &batch.mask, Some(&batch.weights), loss.clamp_eps).unwrap();
    let total = multi_task_loss(&mut g, lc, ls, &fv.params, loss).unwrap();
    let value = g.value(total).item();
    let pattern = g.activation_pattern();
    let mut out = Vec::new();
    if grads {
        g.backward(total).unwrap();
        net.reclaim(&mut g, &fv).unwrap();
        out = net
            .params()
            .iter()
            .map(|p| p.grad().map_or(vec![0.0; p.numel()], |s| s.to_vec()))
            .collect();
    }
    (value, pattern, out)
}
