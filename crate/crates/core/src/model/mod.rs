//! The multi-task network: a 14-layer 3D encoder-decoder trunk that forks
//! into a segmentation head (conv, sigmoid) and a classification head
//! (conv, two fully connected layers, softmax).

mod weights;

pub use weights::{load_weights, save_weights};
pub(crate) use weights::{read_arrays, write_arrays, NamedArray};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{BatchNormMode, Graph, Padding, RunningStats, Tensor, Var};

/// Index of the nodule class in the classification output.
pub const NODULE: usize = 1;
/// Number of shared conv layers before the fork.
pub const TRUNK_LAYERS: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Patch extents `(z, y, x)`.
    pub input_shape: [usize; 3],
    /// Output channels of each trunk conv layer.
    pub channels_per_stage: Vec<usize>,
    /// 1-based trunk layers followed by a 2x2 xy max-pool.
    pub pool_positions: Vec<usize>,
    /// 1-based trunk layers followed by a factor-2 xy upsample.
    pub upsample_positions: Vec<usize>,
    /// Output channels of the classification head's conv layer.
    pub cls_head_channels: usize,
    /// Concatenate each pre-pool feature map onto the matching upsampled
    /// one, so decoder layers also see full-detail encoder features.
    pub skip_connections: bool,
    pub fc_hidden: usize,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_shape: [8, 32, 32],
            channels_per_stage: vec![16, 16, 32, 32, 64, 64, 64, 64, 64, 32, 32, 16, 16, 16],
            pool_positions: vec![2, 4, 6],
            upsample_positions: vec![8, 10, 12],
            cls_head_channels: 1,
            skip_connections: false,
            fc_hidden: 1024,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Same layout with every trunk width replaced by `f(width)`.
    pub fn with_widths(mut self, f: impl Fn(usize) -> usize) -> Self {
        self.channels_per_stage
            .iter_mut()
            .for_each(|c| *c = f(*c).max(1));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_per_stage.len() != TRUNK_LAYERS {
            return Err(config_err!(
                "trunk must have exactly {TRUNK_LAYERS} conv layers, got {}",
                self.channels_per_stage.len()
            ));
        }
        if self.channels_per_stage.contains(&0) || self.cls_head_channels == 0 {
            return Err(config_err!("every conv layer needs at least one channel"));
        }
        if self.input_shape.contains(&0) {
            return Err(config_err!("input_shape extents must be positive"));
        }
        for (name, pos) in [
            ("pool_positions", &self.pool_positions),
            ("upsample_positions", &self.upsample_positions),
        ] {
            if pos.iter().any(|&p| p == 0 || p > TRUNK_LAYERS) {
                return Err(config_err!(
                    "{name} must lie in 1..={TRUNK_LAYERS}, got {pos:?}"
                ));
            }
            if pos.windows(2).any(|w| w[0] >= w[1]) {
                return Err(config_err!(
                    "{name} must be strictly increasing, got {pos:?}"
                ));
            }
        }
        if let Some(p) = self
            .pool_positions
            .iter()
            .find(|p| self.upsample_positions.contains(p))
        {
            return Err(config_err!(
                "layer {p} cannot be followed by both a pool and an upsample"
            ));
        }
        if self.pool_positions.len() != self.upsample_positions.len() {
            return Err(config_err!(
                "pool count ({}) must equal upsample count ({}) so the decoder restores xy resolution",
                self.pool_positions.len(),
                self.upsample_positions.len()
            ));
        }
        let mut depth = 0i64;
        for layer in 1..=TRUNK_LAYERS {
            if self.pool_positions.contains(&layer) {
                depth += 1;
            }
            if self.upsample_positions.contains(&layer) {
                depth -= 1;
                if depth < 0 {
                    return Err(config_err!(
                        "upsample after layer {layer} has no preceding pool to undo"
                    ));
                }
            }
        }
        let f = 1 << self.pool_positions.len();
        let [_, y, x] = self.input_shape;
        if y % f != 0 || x % f != 0 {
            return Err(config_err!(
                "input y and x ({y}, {x}) must be divisible by 2^{} = {f}",
                self.pool_positions.len()
            ));
        }
        if self.fc_hidden < 2 {
            return Err(config_err!(
                "fc_hidden must be at least 2, got {}",
                self.fc_hidden
            ));
        }
        if self.bn_eps <= 0.0 {
            return Err(config_err!("bn_eps must be positive"));
        }
        Ok(())
    }

    /// Structural fingerprint: everything that fixes parameter names and
    /// shapes. Two configs with equal signatures load each other's weights.
    pub fn signature(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "input={} trunk={} pool={} up={} cls_conv={} fc={}{}",
            self.input_shape.map(|d| d.to_string()).join("x"),
            list(&self.channels_per_stage),
            list(&self.pool_positions),
            list(&self.upsample_positions),
            self.cls_head_channels,
            self.fc_hidden,
            if self.skip_connections { " skip" } else { "" }
        )
    }

    fn voxels(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Input channels of each trunk layer, then of the two heads.
    fn conv_inputs(&self) -> (Vec<usize>, usize) {
        let mut ins = Vec::with_capacity(TRUNK_LAYERS);
        let mut saved = Vec::new();
        let mut cin = 1;
        for (i, &c) in self.channels_per_stage.iter().enumerate() {
            ins.push(cin);
            cin = c;
            if self.skip_connections {
                if self.pool_positions.contains(&(i + 1)) {
                    saved.push(c);
                }
                if self.upsample_positions.contains(&(i + 1)) {
                    cin += saved.pop().expect("validated pool before upsample");
                }
            }
        }
        (ins, cin)
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        let (ins, cin) = self.conv_inputs();
        for (&c, &i) in self.channels_per_stage.iter().zip(&ins) {
            n += 27 * i * c + c + 2 * c;
        }
        let hc = self.cls_head_channels;
        n += 27 * cin + 1;
        n += 27 * cin * hc + hc + 2 * hc;
        n += hc * self.voxels() * self.fc_hidden + self.fc_hidden;
        n + 2 * self.fc_hidden + 2
    }
}

/// Parameters and batch-norm statistics of an instantiated network.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskNet {
    cfg: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    /// One per batch-norm layer: the 14 trunk layers, then the class head.
    stats: Vec<RunningStats>,
}

/// Handles of one recorded forward pass.
pub struct ForwardVars {
    pub class_probs: Var,
    pub seg_probs: Var,
    /// Parameter leaves, parallel to [`MultiTaskNet::params`].
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub nodule_prob: f64,
    /// `seg_prob >= threshold`, row-major `(z, y, x)`.
    pub mask: Vec<u8>,
}

/// Which parameters belong to which part of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Trunk,
    SegHead,
    ClsHead,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<usize>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) {
        self.names.push(name);
        self.shapes.push(shape);
        self.fan_in.push(fan_in);
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, bn: bool) {
        self.push(
            format!("{prefix}.conv.weight"),
            vec![cout, cin, 3, 3, 3],
            27 * cin,
        );
        self.push(format!("{prefix}.conv.bias"), vec![cout], 0);
        if bn {
            self.push(format!("{prefix}.bn.gamma"), vec![cout], 0);
            self.push(format!("{prefix}.bn.beta"), vec![cout], 0);
        }
    }

    fn new(cfg: &NetworkConfig) -> Self {
        let mut l = Layout {
            names: vec![],
            shapes: vec![],
            fan_in: vec![],
        };
        let (ins, cin) = cfg.conv_inputs();
        for (i, (&c, &ci)) in cfg.channels_per_stage.iter().zip(&ins).enumerate() {
            l.conv(&format!("trunk.{:02}", i + 1), ci, c, true);
        }
        l.conv("seg", cin, 1, false);
        let hc = cfg.cls_head_channels;
        l.conv("cls", cin, hc, true);
        let flat = hc * cfg.voxels();
        l.push("cls.fc1.weight".into(), vec![cfg.fc_hidden, flat], flat);
        l.push("cls.fc1.bias".into(), vec![cfg.fc_hidden], 0);
        l.push(
            "cls.fc2.weight".into(),
            vec![2, cfg.fc_hidden],
            cfg.fc_hidden,
        );
        l.push("cls.fc2.bias".into(), vec![2], 0);
        l
    }
}

impl MultiTaskNet {
    /// He-initialized network; biases and BN shifts 0, BN scales 1.
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::with_capacity(layout.names.len());
        for ((name, shape), &fan_in) in layout.names.iter().zip(&layout.shapes).zip(&layout.fan_in)
        {
            let mut t = Tensor::zeros(shape);
            if fan_in > 0 {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(&mut rng));
            } else if name.ends_with(".gamma") {
                t.data_mut().fill(1.0);
            }
            params.push(t);
        }
        let mut stats: Vec<RunningStats> = cfg
            .channels_per_stage
            .iter()
            .map(|&c| RunningStats::new(c))
            .collect();
        stats.push(RunningStats::new(cfg.cls_head_channels));
        Ok(MultiTaskNet {
            cfg: cfg.clone(),
            names: layout.names,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn part_of(&self, index: usize) -> Part {
        let name = &self.names[index];
        if name.starts_with("trunk.") {
            Part::Trunk
        } else if name.starts_with("seg.") {
            Part::SegHead
        } else {
            Part::ClsHead
        }
    }

    /// Records a training forward pass on `g`. The parameters are moved
    /// onto the graph as differentiable leaves; hand them back with
    /// [`MultiTaskNet::reclaim`] after `backward`, grads included.
    /// Train mode uses batch statistics and updates the running ones.
    pub fn record(
        &mut self,
        g: &mut Graph,
        input: Var,
        mode: BatchNormMode,
    ) -> Result<ForwardVars> {
        let params = std::mem::take(&mut self.params);
        let pv: Vec<Var> = params.into_iter().map(|p| g.param(p)).collect();
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.build(g, input, &pv, mode, &mut stats);
        self.stats = stats;
        match out {
            Ok((class_probs, seg_probs)) => Ok(ForwardVars {
                class_probs,
                seg_probs,
                params: pv,
            }),
            Err(e) => {
                self.params = pv.iter().map(|&v| g.take_leaf(v)).collect::<Result<_>>()?;
                Err(e)
            }
        }
    }

    /// Moves the parameters recorded by [`MultiTaskNet::record`] back.
    pub fn reclaim(&mut self, g: &mut Graph, fv: &ForwardVars) -> Result<()> {
        if !self.params.is_empty() || fv.params.len() != self.names.len() {
            return Err(crate::Error::Usage(
                "reclaim without a matching record".into(),
            ));
        }
        self.params = fv
            .params
            .iter()
            .map(|&v| g.take_leaf(v))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn build(
        &self,
        g: &mut Graph,
        input: Var,
        pv: &[Var],
        mode: BatchNormMode,
        stats: &mut [RunningStats],
    ) -> Result<(Var, Var)> {
        let [_, c, z, y, x] = g.value(input).dims5()?;
        if c != 1 || [z, y, x] != self.cfg.input_shape {
            return Err(shape_err!(
                "network expects [batch, 1, {}, {}, {}], got {:?}",
                self.cfg.input_shape[0],
                self.cfg.input_shape[1],
                self.cfg.input_shape[2],
                g.value(input).shape()
            ));
        }
        let eps = self.cfg.bn_eps;
        let mut next = pv.iter().copied();
        let mut take = || next.next().expect("layout covers every layer");
        let mut h = input;
        let mut saved = Vec::new();
        for layer in 1..=TRUNK_LAYERS {
            let (w, b, gm, bt) = (take(), take(), take(), take());
            h = g.conv3d(h, w, b, Padding::Same)?;
            h = g.batch_norm(h, gm, bt, eps, mode, &mut stats[layer - 1])?;
            h = g.relu(h);
            if self.cfg.pool_positions.contains(&layer) {
                if self.cfg.skip_connections {
                    saved.push(h);
                }
                h = g.max_pool_xy(h)?;
            }
            if self.cfg.upsample_positions.contains(&layer) {
                h = g.upsample_xy(h)?;
                if let Some(s) = saved.pop() {
                    h = g.concat_channels(h, s)?;
                }
            }
        }
        let (sw, sb) = (take(), take());
        let seg = g.conv3d(h, sw, sb, Padding::Same)?;
        let seg_probs = g.sigmoid(seg);

        let (cw, cb, gm, bt) = (take(), take(), take(), take());
        let mut k = g.conv3d(h, cw, cb, Padding::Same)?;
        k = g.batch_norm(k, gm, bt, eps, mode, &mut stats[TRUNK_LAYERS])?;
        k = g.relu(k);
        k = g.flatten(k)?;
        let (w1, b1, w2, b2) = (take(), take(), take(), take());
        k = g.linear(k, w1, b1)?;
        k = g.relu(k);
        k = g.linear(k, w2, b2)?;
        let class_probs = g.softmax(k)?;
        Ok((class_probs, seg_probs))
    }

    /// Inference-mode forward: `([b, 2] class probabilities, [b, 1, z, y, x]
    /// segmentation probabilities)`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let input = g.input(batch.clone());
        let pv: Vec<Var> = self.params.iter().map(|p| g.input(p.clone())).collect();
        let mut stats = self.stats.clone();
        let (cls, seg) = self.build(&mut g, input, &pv, BatchNormMode::Infer, &mut stats)?;
        Ok((g.value(cls).clone(), g.value(seg).clone()))
    }

    /// Nodule probability and thresholded mask for every patch of `batch`.
    pub fn predict(&self, batch: &Tensor, seg_threshold: f64) -> Result<Vec<Prediction>> {
        if !(seg_threshold > 0.0 && seg_threshold < 1.0) {
            return Err(config_err!(
                "seg_threshold must lie in (0, 1), got {seg_threshold}"
            ));
        }
        let (cls, seg) = self.forward(batch)?;
        let per = self.cfg.voxels();
        Ok(cls
            .data()
            .chunks_exact(2)
            .zip(seg.data().chunks_exact(per))
            .map(|(c, s)| Prediction {
                nodule_prob: c[NODULE],
                mask: s.iter().map(|&p| u8::from(p >= seg_threshold)).collect(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> NetworkConfig {
        NetworkConfig {
            input_shape: [2, 8, 8],
            channels_per_stage: vec![2; 14],
            fc_hidden: 4,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        NetworkConfig::default().validate().unwrap();
    }

    #[test]
    fn violations_name_the_constraint() {
        let msg = |c: NetworkConfig| c.validate().unwrap_err().to_string();
        let mut c = NetworkConfig::default();
        c.channels_per_stage.pop();
        assert!(msg(c).contains("exactly 14"));
        let mut c = NetworkConfig::default();
        c.upsample_positions.pop();
        assert!(msg(c).contains("pool count"));
        let c = NetworkConfig {
            input_shape: [8, 20, 32],
            ..Default::default()
        };
        assert!(msg(c).contains("divisible"));
        let c = NetworkConfig {
            fc_hidden: 1,
            ..Default::default()
        };
        assert!(msg(c).contains("fc_hidden"));
        let c = NetworkConfig {
            pool_positions: vec![9, 10, 11],
            upsample_positions: vec![2, 4, 6],
            ..Default::default()
        };
        assert!(msg(c).contains("no preceding pool"));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MultiTaskNet::new(&tiny()).unwrap();
        let b = MultiTaskNet::new(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = MultiTaskNet::new(&NetworkConfig { seed: 8, ..tiny() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn outputs_have_contract_shapes() {
        let net = MultiTaskNet::new(&tiny()).unwrap();
        let batch = Tensor::new(
            &[3, 1, 2, 8, 8],
            (0..384).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let (cls, seg) = net.forward(&batch).unwrap();
        assert_eq!(cls.shape(), &[3, 2]);
        assert_eq!(seg.shape(), &[3, 1, 2, 8, 8]);
        for row in cls.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
        assert!(seg.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = MultiTaskNet::new(&tiny()).unwrap();
        let bad = Tensor::zeros(&[1, 1, 2, 8, 16]);
        assert!(matches!(net.forward(&bad), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn predict_thresholds_inclusively() {
        let mut net = MultiTaskNet::new(&tiny()).unwrap();
        // Zero seg kernel and bias: every probability is exactly 0.5.
        for i in 0..net.params().len() {
            if net.part_of(i) == Part::SegHead {
                net.params_mut()[i].data_mut().fill(0.0);
            }
        }
        let batch = Tensor::full(&[1, 1, 2, 8, 8], 0.3);
        let p = net.predict(&batch, 0.5).unwrap();
        assert!(p[0].mask.iter().all(|&m| m == 1));
        let p = net.predict(&batch, 0.5 + 1e-9).unwrap();
        assert!(p[0].mask.iter().all(|&m| m == 0));
    }
}
