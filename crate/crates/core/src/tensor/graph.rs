use super::conv::{self, Dims};
use super::Tensor;
use super::{dense, kernels};
use crate::error::{config_err, data_err, shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad by one voxel so the output keeps the input's spatial shape.
    Same,
    /// No padding; each spatial extent shrinks by two.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

/// Which side of every non-differentiable point the recorded graph sits
/// on: relu signs, max-pool winners and clamp regions. Two forward passes
/// with equal patterns evaluate the same smooth branch.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ActivationPattern(Vec<usize>);

enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        batch: usize,
        cin: usize,
        cout: usize,
        inp: Dims,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaxPoolXy {
        x: Var,
        argmax: Vec<usize>,
    },
    UpsampleXy {
        x: Var,
        dims: [usize; 5],
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    ConcatChannels(Var, Var),
    CrossEntropyClass {
        pred: Var,
        labels: Vec<usize>,
        eps: f64,
    },
    CrossEntropyVoxel {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
        eps: f64,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that [`Graph::backward`] can replay it
/// in reverse. Nodes are appended in evaluation order, so the node list is
/// always topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients reaching a leaf with `requires_grad`
    /// accumulate into its tensor's grad slot.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Shorthand for a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Shorthand for a constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Moves a leaf's tensor (with its grad slot) out of the graph, leaving
    /// a one-element placeholder. Later reads of `v` see the placeholder.
    pub fn take_leaf(&mut self, v: Var) -> Result<Tensor> {
        let n = &mut self.nodes[v.0];
        if !matches!(n.op, Op::Leaf) {
            return Err(Error::Usage(format!("node {} is not a leaf", v.0)));
        }
        Ok(std::mem::replace(&mut n.value, Tensor::scalar(0.0)))
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears the grad slots of every leaf.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation with a `[cout, cin, 3, 3, 3]` kernel at stride 1.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let [b, cin, z, y, x] = self.value(input).dims5()?;
        let ks = self.value(kernel).shape();
        if ks.len() != 5 {
            return Err(shape_err!("conv3d kernel must be 5-D, got {ks:?}"));
        }
        if ks[2..] != [3, 3, 3] {
            return Err(config_err!(
                "conv3d kernel must be 3x3x3, got {:?}",
                &ks[2..]
            ));
        }
        let cout = ks[0];
        if ks[1] != cin {
            return Err(shape_err!(
                "conv3d channel mismatch: input has {cin}, kernel expects {}",
                ks[1]
            ));
        }
        if self.value(bias).numel() != cout {
            return Err(shape_err!(
                "conv3d bias has {} values, kernel has {cout} outputs",
                self.value(bias).numel()
            ));
        }
        let pad = match padding {
            Padding::Same => 1,
            Padding::Valid => {
                if z < 3 || y < 3 || x < 3 {
                    return Err(shape_err!(
                        "valid conv3d needs spatial extents >= 3, got {:?}",
                        [z, y, x]
                    ));
                }
                0
            }
        };
        let inp = [z, y, x];
        let od = inp.map(|d| d + 2 * pad - 2);
        let ovol = conv::vol(od);
        let mut out = vec![0.0; b * cout * ovol];
        for (i, chunk) in out.chunks_exact_mut(ovol).enumerate() {
            chunk.fill(self.value(bias).data()[i % cout]);
        }
        let (src, _) = conv::pad(self.value(input).data(), b * cin, inp, pad);
        conv::correlate(b, cin, cout, &src, od, self.value(kernel).data(), &mut out);
        let value = Tensor::new(&[b, cout, od[0], od[1], od[2]], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                bias,
                batch: b,
                cin,
                cout,
                inp,
                pad,
            },
            rg,
        ))
    }

    /// Per-channel normalization over `(batch, z, y, x)`.
    ///
    /// In [`BatchNormMode::Train`] the batch statistics are used and
    /// `stats` is updated; in [`BatchNormMode::Infer`] `stats` is used as is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BatchNormMode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(config_err!("batch_norm eps must be positive, got {eps}"));
        }
        let [b, c, z, y, xx] = self.value(x).dims5()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!(
                "batch_norm affine parameters must have {c} values"
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err!(
                "batch_norm running stats must have {c} channels"
            ));
        }
        let vol = z * y * xx;
        let count = b * vol;
        let train = mode == BatchNormMode::Train;
        if train && count < 2 {
            return Err(data_err!(
                "batch_norm in train mode needs at least 2 values per channel, got {count}"
            ));
        }
        let xs = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            kernels::for_channel_blocks(b, c, vol, xs, |ch, s| mean[ch] += s.iter().sum::<f64>());
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; c];
            kernels::for_channel_blocks(b, c, vol, xs, |ch, s| {
                let m = mean[ch];
                var[ch] += s.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            });
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * vol;
                for i in off..off + vol {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        if train {
            let m = stats.momentum;
            let unbias = count as f64 / (count - 1) as f64;
            for ch in 0..c {
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean[ch];
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * var[ch] * unbias;
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Row-wise softmax of a `[batch, classes]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let [_, k] = src.shape()[..] else {
            return Err(shape_err!(
                "softmax expects [batch, classes], got {:?}",
                src.shape()
            ));
        };
        let mut out = src.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(src.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Non-overlapping 2x2 max over the (y, x) plane; z is untouched.
    pub fn max_pool_xy(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims5()?;
        let [b, c, z, y, xx] = dims;
        if y % 2 != 0 || xx % 2 != 0 {
            return Err(shape_err!(
                "max_pool_xy needs even y and x, got y={y}, x={xx}"
            ));
        }
        let mut out = vec![0.0; b * c * z * (y / 2) * (xx / 2)];
        let argmax = kernels::max_pool_xy_forward(dims, self.value(x).data(), &mut out);
        let value = Tensor::new(&[b, c, z, y / 2, xx / 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPoolXy { x, argmax }, rg))
    }

    /// Factor-2 bilinear interpolation in the (y, x) plane using half-pixel
    /// centres with border clamping; z is untouched.
    pub fn upsample_xy(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims5()?;
        let [b, c, z, y, xx] = dims;
        let mut out = vec![0.0; b * c * z * 4 * y * xx];
        kernels::upsample_xy_forward(dims, self.value(x).data(), &mut out);
        let value = Tensor::new(&[b, c, z, 2 * y, 2 * xx], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::UpsampleXy { x, dims }, rg))
    }

    /// Affine map `x * W^T + bias` for `x: [b, n]`, `W: [m, n]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let [b, n] = self.value(x).shape()[..] else {
            return Err(shape_err!(
                "linear input must be 2-D, got {:?}",
                self.value(x).shape()
            ));
        };
        let [m, wn] = self.value(weight).shape()[..] else {
            return Err(shape_err!("linear weight must be 2-D"));
        };
        if wn != n {
            return Err(shape_err!(
                "linear dimension mismatch: input has {n}, weight expects {wn}"
            ));
        }
        if self.value(bias).numel() != m {
            return Err(shape_err!("linear bias must have {m} values"));
        }
        let mut out = vec![0.0; b * m];
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(self.value(bias).data());
        }
        dense::forward(
            b,
            n,
            m,
            self.value(x).data(),
            self.value(weight).data(),
            &mut out,
        );
        let value = Tensor::new(&[b, m], out)?;
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(value, Op::Linear { x, weight, bias }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Stacks `a: [b, ca, z, y, x]` and `b: [b, cb, z, y, x]` into
    /// `[b, ca + cb, z, y, x]`, channels of `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, z, y, x] = self.value(a).dims5()?;
        let [nb, cb, zb, yb, xb] = self.value(b).dims5()?;
        if [n, z, y, x] != [nb, zb, yb, xb] {
            return Err(shape_err!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let vol = z * y * x;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * vol..(i + 1) * ca * vol]);
            out.extend_from_slice(&db[i * cb * vol..(i + 1) * cb * vol]);
        }
        let value = Tensor::new(&[n, ca + cb, z, y, x], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    /// `[b, ...] -> [b, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// Mean over the batch of `-ln(clamp(pred[i, label_i]))`.
    pub fn cross_entropy_class(&mut self, pred: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let p = self.value(pred);
        let [b, k] = p.shape()[..] else {
            return Err(shape_err!(
                "class predictions must be [batch, classes], got {:?}",
                p.shape()
            ));
        };
        if labels.len() != b {
            return Err(shape_err!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= k) {
            return Err(data_err!("class label {l} outside 0..{k}"));
        }
        for (i, row) in p.data().chunks_exact(k).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(data_err!("prediction row {i} sums to {s}, expected 1"));
            }
        }
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p.data()[i * k + l].clamp(eps, 1.0 - eps).ln())
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyClass {
                pred,
                labels: labels.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Weighted mean over voxels of binary cross-entropy.
    ///
    /// `sample_weights` (one per batch entry) lets unlabeled samples be
    /// excluded; `None` weighs every voxel equally. When every weight is
    /// zero the loss is 0.
    pub fn cross_entropy_voxel(
        &mut self,
        pred: Var,
        target: &Tensor,
        sample_weights: Option<&[f64]>,
        eps: f64,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err!(
                "mask shape {:?} does not match prediction {:?}",
                target.shape(),
                p.shape()
            ));
        }
        if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(data_err!("mask values must be 0 or 1, found {v}"));
        }
        let b = p.shape()[0];
        let per = p.numel() / b;
        let weights: Vec<f64> = match sample_weights {
            Some(w) if w.len() != b => {
                return Err(shape_err!("{} sample weights for a batch of {b}", w.len()))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; b],
        };
        let norm: f64 = weights.iter().sum::<f64>() * per as f64;
        let mut loss = 0.0;
        if norm > 0.0 {
            for (i, (&pv, &t)) in p.data().iter().zip(target.data()).enumerate() {
                let w = weights[i / per];
                if w == 0.0 {
                    continue;
                }
                let pc = pv.clamp(eps, 1.0 - eps);
                loss -= w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
            }
            loss /= norm;
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyVoxel {
                pred,
                target: target.data().to_vec(),
                weights,
                norm,
                eps,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!(
                "add shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!(
                "mul shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    pub fn activation_pattern(&self) -> ActivationPattern {
        let mut p = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => p.extend(self.value(*x).data().iter().map(|&v| (v > 0.0) as usize)),
                Op::MaxPoolXy { argmax, .. } => p.extend_from_slice(argmax),
                Op::CrossEntropyClass { pred, labels, eps } => {
                    let k = self.value(*pred).shape()[1];
                    p.extend(
                        labels
                            .iter()
                            .enumerate()
                            .map(|(i, &l)| clamp_region(self.value(*pred).data()[i * k + l], *eps)),
                    );
                }
                Op::CrossEntropyVoxel { pred, eps, .. } => p.extend(
                    self.value(*pred)
                        .data()
                        .iter()
                        .map(|&v| clamp_region(v, *eps)),
                ),
                _ => {}
            }
        }
        ActivationPattern(p)
    }

    /// Propagates d(loss)/d(node) back through the graph and accumulates
    /// the result into the grad slot of every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        // Existing leaf grad slots become the accumulation buffers.
        for (slot, n) in grads.iter_mut().zip(&mut self.nodes) {
            if n.requires_grad && matches!(n.op, Op::Leaf) {
                *slot = n.value.take_grad();
            }
        }
        match &mut grads[loss.0] {
            Some(g) => g[0] += 1.0,
            None => grads[loss.0] = Some(vec![1.0]),
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad_owned(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        // Runs `f` on the gradient buffer of `v` when `v` needs one.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Conv3d {
                input,
                kernel,
                bias,
                batch,
                cin,
                cout,
                inp,
                pad,
            } => {
                let (batch, cin, cout, pad) = (*batch, *cin, *cout, *pad);
                let od = inp.map(|d| d + 2 * pad - 2);
                let ovol = conv::vol(od);
                with(*bias, &mut |gb| {
                    for (i, chunk) in g.chunks_exact(ovol).enumerate() {
                        gb[i % cout] += chunk.iter().sum::<f64>();
                    }
                });
                with(*kernel, &mut |gk| {
                    let (src, _) = conv::pad(nodes[input.0].value.data(), batch * cin, *inp, pad);
                    conv::weight_grad(batch, cin, cout, &src, od, g, gk);
                });
                with(*input, &mut |gi| {
                    let (gpad, _) = conv::pad(g, batch * cout, od, 2 - pad);
                    let wt = conv::flip_transpose(nodes[kernel.0].value.data(), cout, cin);
                    conv::correlate(batch, cout, cin, &gpad, *inp, &wt, gi);
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, z, y, xx] = nodes[x.0].value.dims5().expect("5-D");
                let vol = z * y * xx;
                let count = (b * vol) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * vol;
                        for j in off..off + vol {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                with(*gamma, &mut |gg| {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, s)| *a += s)
                });
                with(*beta, &mut |gb| {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, s)| *a += s)
                });
                let gam = nodes[gamma.0].value.data();
                with(*x, &mut |gx| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * vol;
                            let k = gam[ch] * inv_std[ch];
                            if *train {
                                let mg = sum_g[ch] / count;
                                let mgx = sum_gx[ch] / count;
                                for j in off..off + vol {
                                    gx[j] += k * (g[j] - mg - xhat[j] * mgx);
                                }
                            } else {
                                for j in off..off + vol {
                                    gx[j] += k * g[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xs = nodes[x.0].value.data();
                with(*x, &mut |gx| {
                    for ((a, &gi), &xv) in gx.iter_mut().zip(g).zip(xs) {
                        if xv > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => with(*x, &mut |gx| {
                for ((a, &gi), &s) in gx.iter_mut().zip(g).zip(out) {
                    *a += gi * s * (1.0 - s);
                }
            }),
            Op::Softmax(x) => {
                let k = nodes[i].value.shape()[1];
                with(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx
                        .chunks_exact_mut(k)
                        .zip(g.chunks_exact(k))
                        .zip(out.chunks_exact(k))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::MaxPoolXy { x, argmax } => with(*x, &mut |gx| {
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }),
            Op::UpsampleXy { x, dims } => {
                with(*x, &mut |gx| kernels::upsample_xy_backward(*dims, g, gx))
            }
            Op::Linear { x, weight, bias } => {
                let xs = nodes[x.0].value.data();
                let ws = nodes[weight.0].value.data();
                let [b, n] = nodes[x.0].value.shape()[..] else {
                    unreachable!()
                };
                let m = nodes[weight.0].value.shape()[0];
                with(*bias, &mut |gb| {
                    for row in g.chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
                with(*weight, &mut |gw| dense::weight_grad(b, n, m, g, xs, gw));
                with(*x, &mut |gx| dense::input_grad(b, n, m, g, ws, gx));
            }
            Op::Reshape(x) => with(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, v)| *a += v)
            }),
            Op::ConcatChannels(a, b) => {
                let n = nodes[i].value.shape()[0];
                let la = nodes[a.0].value.numel() / n;
                let lb = nodes[b.0].value.numel() / n;
                with(*a, &mut |ga| {
                    for (dst, src) in ga.chunks_exact_mut(la).zip(g.chunks_exact(la + lb)) {
                        dst.iter_mut().zip(&src[..la]).for_each(|(x, v)| *x += v);
                    }
                });
                with(*b, &mut |gb| {
                    for (dst, src) in gb.chunks_exact_mut(lb).zip(g.chunks_exact(la + lb)) {
                        dst.iter_mut().zip(&src[la..]).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::CrossEntropyClass { pred, labels, .. } => {
                let p = nodes[pred.0].value.data();
                let k = nodes[pred.0].value.shape()[1];
                let scale = g[0] / labels.len() as f64;
                with(*pred, &mut |gp| {
                    for (r, &l) in labels.iter().enumerate() {
                        gp[r * k + l] -= scale / p[r * k + l].max(f64::MIN_POSITIVE);
                    }
                });
            }
            Op::CrossEntropyVoxel {
                pred,
                target,
                weights,
                norm,
                eps: _,
            } => {
                if *norm == 0.0 {
                    return;
                }
                let p = nodes[pred.0].value.data();
                let per = p.len() / weights.len();
                let scale = g[0] / norm;
                with(*pred, &mut |gp| {
                    for (j, ((a, &pv), &t)) in gp.iter_mut().zip(p).zip(target).enumerate() {
                        let w = weights[j / per];
                        if w != 0.0 {
                            let (p1, p0) = (pv.max(f64::MIN_POSITIVE), (1.0 - pv).max(f64::MIN_POSITIVE));
                            *a += scale * w * (-t / p1 + (1.0 - t) / p0);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += v)
                });
                with(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, v)| *x += v)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with(*a, &mut |ga| {
                    for ((x, &gi), &o) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * o;
                    }
                });
                with(*b, &mut |gb| {
                    for ((x, &gi), &o) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * o;
                    }
                });
            }
            Op::Scale(x, f) => with(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, v)| *a += f * v)
            }),
            Op::Sum(x) => with(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::SumSquares(x) => {
                let xs = nodes[x.0].value.data();
                with(*x, &mut |gx| {
                    for (a, &v) in gx.iter_mut().zip(xs) {
                        *a += 2.0 * v * g[0];
                    }
                });
            }
        }
    }
}

fn clamp_region(v: f64, eps: f64) -> usize {
    if v <= eps {
        0
    } else if v >= 1.0 - eps {
        2
    } else {
        1
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
