//! Finite-difference cases for every differentiable primitive, shared by
//! the gradient tests and the acceptance run.

use nodulenet::losses::{multi_task_loss, MultiTaskLossConfig};
use nodulenet::tensor::{BatchNormMode, Graph, Padding, RunningStats, Tensor};
use rand::Rng;

use super::{check_grads, project, rel_err, rng, uniform, GradReport, FD_STEP};

/// Relative error bound for single primitives.
pub const TOL: f64 = 1e-5;

pub type Case = (&'static str, fn() -> Vec<GradReport>);

pub const CASES: &[Case] = &[
    ("conv3d", conv3d),
    ("conv3d_wide", conv3d_wide),
    ("batch_norm", batch_norm),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("max_pool_xy", max_pool_xy),
    ("bilinear_upsample_xy", upsample_xy),
    ("fully_connected", fully_connected),
    ("concat_channels", concat_channels),
    ("cross_entropy_class", cross_entropy_class),
    ("cross_entropy_class_simplex", cross_entropy_class_simplex),
    ("cross_entropy_voxel", cross_entropy_voxel),
    ("multi_task_loss", multi_task_loss_case),
    ("composite", composite),
];

pub fn conv3d() -> Vec<GradReport> {
    let mut r = rng(11);
    let x = uniform(&mut r, &[1, 2, 4, 4, 4], -1.0, 1.0);
    let k = uniform(&mut r, &[3, 2, 3, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[3], -1.0, 1.0);
    [Padding::Same, Padding::Valid]
        .into_iter()
        .map(|padding| {
            check_grads(&[x.clone(), k.clone(), b.clone()], |g, v| {
                let out = g.conv3d(v[0], v[1], v[2], padding).unwrap();
                project(g, out, 5)
            })
        })
        .collect()
}

/// Rows longer than one vector lane group and more than eight outputs.
pub fn conv3d_wide() -> Vec<GradReport> {
    let mut r = rng(12);
    let x = uniform(&mut r, &[2, 3, 2, 3, 6], -1.0, 1.0);
    let k = uniform(&mut r, &[9, 3, 3, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[9], -1.0, 1.0);
    vec![check_grads(&[x, k, b], |g, v| {
        let out = g.conv3d(v[0], v[1], v[2], Padding::Same).unwrap();
        project(g, out, 6)
    })]
}

pub fn batch_norm() -> Vec<GradReport> {
    let mut r = rng(21);
    let x = uniform(&mut r, &[2, 3, 2, 4, 4], -1.0, 1.0);
    let gamma = uniform(&mut r, &[3], 0.5, 1.5);
    let beta = uniform(&mut r, &[3], -1.0, 1.0);
    [BatchNormMode::Train, BatchNormMode::Infer]
        .into_iter()
        .map(|mode| {
            check_grads(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
                let mut stats = RunningStats::new(3);
                stats.mean = vec![0.1, -0.2, 0.05];
                stats.var = vec![0.7, 1.3, 0.9];
                let out = g
                    .batch_norm(v[0], v[1], v[2], 1e-5, mode, &mut stats)
                    .unwrap();
                project(g, out, 7)
            })
        })
        .collect()
}

/// Inputs kept at least 1e-3 away from the relu kink.
fn activation_input() -> Tensor {
    let mut x = uniform(&mut rng(31), &[3, 7], -1.0, 1.0);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v += 2e-3;
        }
    }
    x
}

pub fn relu() -> Vec<GradReport> {
    let rep = check_grads(&[activation_input()], |g, v| {
        let out = g.relu(v[0]);
        project(g, out, 8)
    });
    assert_eq!(rep.skipped_kinks, 0);
    vec![rep]
}

pub fn sigmoid() -> Vec<GradReport> {
    vec![check_grads(&[activation_input()], |g, v| {
        let out = g.sigmoid(v[0]);
        project(g, out, 9)
    })]
}

pub fn softmax() -> Vec<GradReport> {
    vec![check_grads(&[activation_input()], |g, v| {
        let out = g.softmax(v[0]).unwrap();
        project(g, out, 10)
    })]
}

/// Distinct values spaced well beyond the finite-difference step, so no
/// window has a tie.
pub fn max_pool_xy() -> Vec<GradReport> {
    let mut r = rng(41);
    let mut vals: Vec<f64> = (0..32).map(|i| -1.0 + i as f64 * (2.0 / 32.0)).collect();
    for i in (1..vals.len()).rev() {
        let j = r.gen_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::new(&[1, 1, 2, 4, 4], vals).unwrap();
    let rep = check_grads(&[x], |g, v| {
        let out = g.max_pool_xy(v[0]).unwrap();
        project(g, out, 11)
    });
    assert_eq!(rep.skipped_kinks, 0);
    vec![rep]
}

pub fn upsample_xy() -> Vec<GradReport> {
    let x = uniform(&mut rng(51), &[1, 2, 2, 3, 3], -1.0, 1.0);
    vec![check_grads(&[x], |g, v| {
        let out = g.upsample_xy(v[0]).unwrap();
        project(g, out, 12)
    })]
}

pub fn fully_connected() -> Vec<GradReport> {
    let mut r = rng(61);
    let x = uniform(&mut r, &[3, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    vec![check_grads(&[x, w, b], |g, v| {
        let out = g.linear(v[0], v[1], v[2]).unwrap();
        project(g, out, 13)
    })]
}

pub fn concat_channels() -> Vec<GradReport> {
    let mut r = rng(101);
    let a = uniform(&mut r, &[2, 2, 1, 2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3, 1, 2, 3], -1.0, 1.0);
    vec![check_grads(&[a, b], |g, v| {
        let out = g.concat_channels(v[0], v[1]).unwrap();
        project(g, out, 14)
    })]
}

pub fn cross_entropy_class() -> Vec<GradReport> {
    let logits = uniform(&mut rng(71), &[4, 2], -1.0, 1.0);
    vec![check_grads(&[logits], |g, v| {
        let p = g.softmax(v[0]).unwrap();
        g.cross_entropy_class(p, &[0, 1, 1, 0], 1e-7).unwrap()
    })]
}

/// Directional derivative along (+1, -1), which keeps each row on the
/// simplex.
pub fn cross_entropy_class_simplex() -> Vec<GradReport> {
    let p = Tensor::new(&[2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
    let labels = [0usize, 1];
    let mut g = Graph::new();
    let pv = g.param(p.clone());
    let loss = g.cross_entropy_class(pv, &labels, 1e-7).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(pv).unwrap().to_vec();
    let mut rep = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for row in 0..2 {
        let eval = |d: f64| {
            let mut q = p.clone();
            q.data_mut()[row * 2] += d;
            q.data_mut()[row * 2 + 1] -= d;
            let mut g = Graph::new();
            let qv = g.input(q);
            let l = g.cross_entropy_class(qv, &labels, 1e-7).unwrap();
            g.value(l).item()
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        let analytic = grad[row * 2] - grad[row * 2 + 1];
        rep.max_rel_err = rep.max_rel_err.max(rel_err(analytic, numeric));
        rep.checked += 1;
    }
    vec![rep]
}

pub fn cross_entropy_voxel() -> Vec<GradReport> {
    let p = uniform(&mut rng(81), &[2, 1, 2, 2, 2], 0.05, 0.95);
    let mask = Tensor::new(
        &[2, 1, 2, 2, 2],
        (0..16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect(),
    )
    .unwrap();
    [None, Some([1.0, 0.0])]
        .into_iter()
        .map(|w| {
            check_grads(&[p.clone()], |g, v| {
                g.cross_entropy_voxel(v[0], &mask, w.as_ref().map(|w| &w[..]), 1e-7)
                    .unwrap()
            })
        })
        .collect()
}

pub fn multi_task_loss_case() -> Vec<GradReport> {
    let mut r = rng(111);
    let lc = uniform(&mut r, &[1], 0.1, 2.0);
    let ls = uniform(&mut r, &[1], 0.1, 2.0);
    let w1 = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let w2 = uniform(&mut r, &[4], -1.0, 1.0);
    let cfg = MultiTaskLossConfig {
        weight_cls: 0.7,
        weight_seg: 1.3,
        lambda: 0.05,
        ..Default::default()
    };
    vec![check_grads(&[lc, ls, w1, w2], |g, v| {
        multi_task_loss(g, v[0], v[1], &v[2..], &cfg).unwrap()
    })]
}

pub fn composite() -> Vec<GradReport> {
    let mut r = rng(91);
    let a = uniform(&mut r, &[6], -1.0, 1.0);
    let b = uniform(&mut r, &[6], -1.0, 1.0);
    vec![check_grads(&[a, b], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let sc = g.scale(s, 0.3);
        let sq = g.sum_squares(sc);
        let m = g.mul(v[0], v[1]).unwrap();
        let sm = g.sum(m);
        g.add(sq, sm).unwrap()
    })]
}
