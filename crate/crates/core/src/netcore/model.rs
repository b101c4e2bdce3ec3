use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::lsbn::{BnParams, LsbnParams, NormLayer, RunningStats};
use super::{FeatureMap, LayerTag, LightingCondition, ModelConfig, NormKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Conv {
    name: String,
    weight: Tensor,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: usize,
    norm1: usize,
    conv2: usize,
    norm2: usize,
    shortcut: Option<(usize, usize)>,
}

/// Describes one trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Set for LSBN affine parameters: the condition they serve.
    pub condition: Option<LightingCondition>,
    pub is_norm: bool,
}

/// Graph leaves bound to the network's parameters for one forward/backward.
///
/// Teacher and student passes built on the same `Binding` share the parameter
/// leaves, so their gradients accumulate in one place.
#[derive(Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
    track: bool,
}

impl Binding {
    /// `track_grad = false` binds parameters as constants.
    pub fn new(net: &PoseNet, track_grad: bool) -> Self {
        Binding {
            vars: vec![None; net.num_params()],
            track: track_grad,
        }
    }

    fn get(&mut self, g: &mut Graph, net: &PoseNet, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let t = net.param(id).clone();
        let v = if self.track { g.leaf(t) } else { g.constant(t) };
        self.vars[id] = Some(v);
        v
    }

    /// The leaf bound to parameter `id`, if any pass used it.
    pub fn var(&self, id: usize) -> Option<Var> {
        self.vars[id]
    }
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub global: Var,
    pub refine: Var,
    /// Top-down pyramid levels P1..P4 (finest first).
    pub pyramid: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    pub global: Var,
    pub refine: Var,
    pub pyramid: Vec<Var>,
    pub features: Vec<(LayerTag, Var)>,
}

impl NetOutput {
    pub fn feature(&self, tag: LayerTag) -> Var {
        self.features
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, v)| *v)
            .expect("every layer tag is produced")
    }
}

/// Graph-free result of a forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub global: Tensor,
    pub refine: Tensor,
    pub features: Vec<FeatureMap>,
}

impl Prediction {
    pub fn feature(&self, tag: LayerTag) -> &FeatureMap {
        self.features
            .iter()
            .find(|f| f.layer == tag)
            .expect("every layer tag is produced")
    }
}

/// Residual backbone + pyramid heads. Teacher and student are the same
/// network evaluated under different lighting conditions.
#[derive(Clone, Debug)]
pub struct PoseNet {
    cfg: ModelConfig,
    convs: Vec<Conv>,
    norms: Vec<NormLayer>,
    norm_names: Vec<String>,
    norm_base: Vec<usize>,
    stem: (usize, usize),
    stages: Vec<Vec<Block>>,
    laterals: [usize; 4],
    global_head: usize,
    refine_reduce: [usize; 4],
    refine_head: usize,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    rng: ChaCha8Rng,
    convs: Vec<Conv>,
    norms: Vec<NormLayer>,
    norm_names: Vec<String>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, std: Option<f64>) -> usize {
        let fan_in = (cin * k * k) as f64;
        let std = std.unwrap_or_else(|| (2.0 / fan_in).sqrt());
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..cout * cin * k * k)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        self.convs.push(Conv {
            name: name.to_string(),
            weight: Tensor::from_vec(&[cout, cin, k, k], data).expect("consistent shape"),
            stride,
            pad: k / 2,
        });
        self.convs.len() - 1
    }

    fn norm(&mut self, name: &str, channels: usize) -> usize {
        let layer = match self.cfg.norm {
            NormKind::Lsbn => NormLayer::Lsbn(LsbnParams::new(channels, self.cfg.eps, self.cfg.momentum)),
            NormKind::Plain => NormLayer::Plain(BnParams {
                affine: super::Affine::identity(channels),
                running: RunningStats::new(channels),
                eps: self.cfg.eps,
                momentum: self.cfg.momentum,
            }),
        };
        self.norms.push(layer);
        self.norm_names.push(name.to_string());
        self.norms.len() - 1
    }
}

impl PoseNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg: &cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            convs: Vec::new(),
            norms: Vec::new(),
            norm_names: Vec::new(),
        };
        let stem = (
            b.conv("c1.conv", 3, cfg.stem_channels, 3, 2, None),
            b.norm("c1.norm", cfg.stem_channels),
        );
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (s, (&cout, &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_strides).enumerate() {
            let mut blocks = Vec::new();
            for k in 0..cfg.blocks_per_stage {
                let st = if k == 0 { stride } else { 1 };
                let p = format!("r{}.{}", s + 1, k);
                let conv1 = b.conv(&format!("{p}.conv1"), cin, cout, 3, st, None);
                let norm1 = b.norm(&format!("{p}.norm1"), cout);
                let conv2 = b.conv(&format!("{p}.conv2"), cout, cout, 3, 1, None);
                let norm2 = b.norm(&format!("{p}.norm2"), cout);
                let shortcut = (st != 1 || cin != cout).then(|| {
                    (
                        b.conv(&format!("{p}.down"), cin, cout, 1, st, None),
                        b.norm(&format!("{p}.down_norm"), cout),
                    )
                });
                blocks.push(Block {
                    conv1,
                    norm1,
                    conv2,
                    norm2,
                    shortcut,
                });
                cin = cout;
            }
            stages.push(blocks);
        }
        let d = cfg.pyramid_channels;
        let laterals = [0, 1, 2, 3].map(|l| b.conv(&format!("global.lateral{}", l + 1), cfg.stage_channels[l], d, 1, 1, None));
        let global_head = b.conv("global.predict", d, cfg.n_joints, 3, 1, Some(0.01));
        let refine_reduce = [0, 1, 2, 3].map(|l| b.conv(&format!("refine.reduce{}", l + 1), d, cfg.refine_channels, 1, 1, None));
        let refine_head = b.conv("refine.predict", 4 * cfg.refine_channels, cfg.n_joints, 3, 1, Some(0.01));

        let Builder {
            convs,
            norms,
            norm_names,
            ..
        } = b;
        let mut norm_base = Vec::with_capacity(norms.len());
        let mut next = convs.len();
        for n in &norms {
            norm_base.push(next);
            next += 2 * n.affine_sets();
        }
        Ok(PoseNet {
            cfg,
            convs,
            norms,
            norm_names,
            norm_base,
            stem,
            stages,
            laterals,
            global_head,
            refine_reduce,
            refine_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Number of trainable tensors.
    pub fn num_params(&self) -> usize {
        self.convs.len() + self.norms.iter().map(|n| 2 * n.affine_sets()).sum::<usize>()
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        (0..self.num_params()).map(|i| self.param(i).len()).sum()
    }

    /// Channels that pass through a normalization layer.
    pub fn normalized_channels(&self) -> usize {
        self.norms.iter().map(|n| n.channels()).sum()
    }

    fn locate_norm(&self, id: usize) -> (usize, usize, bool) {
        let j = self.norm_base.partition_point(|&b| b <= id) - 1;
        let off = id - self.norm_base[j];
        (j, off / 2, off % 2 == 0)
    }

    pub fn param(&self, id: usize) -> &Tensor {
        if id < self.convs.len() {
            return &self.convs[id].weight;
        }
        let (j, set, is_gamma) = self.locate_norm(id);
        let a = self.norms[j].affine_at(set);
        if is_gamma {
            &a.gamma
        } else {
            &a.beta
        }
    }

    pub fn param_mut(&mut self, id: usize) -> &mut Tensor {
        if id < self.convs.len() {
            return &mut self.convs[id].weight;
        }
        let (j, set, is_gamma) = self.locate_norm(id);
        let a = self.norms[j].affine_at_mut(set);
        if is_gamma {
            &mut a.gamma
        } else {
            &mut a.beta
        }
    }

    pub fn param_info(&self, id: usize) -> ParamInfo {
        if id < self.convs.len() {
            let c = &self.convs[id];
            return ParamInfo {
                name: c.name.clone(),
                shape: c.weight.shape().to_vec(),
                condition: None,
                is_norm: false,
            };
        }
        let (j, set, is_gamma) = self.locate_norm(id);
        let (suffix, condition) = match &self.norms[j] {
            NormLayer::Lsbn(_) if set == 0 => ("low", Some(LightingCondition::LowLight)),
            NormLayer::Lsbn(_) => ("well", Some(LightingCondition::WellLit)),
            NormLayer::Plain(_) => ("shared", None),
        };
        let kind = if is_gamma { "gamma" } else { "beta" };
        ParamInfo {
            name: format!("{}.{}.{}", self.norm_names[j], suffix, kind),
            shape: vec![self.norms[j].channels()],
            condition,
            is_norm: true,
        }
    }

    pub fn norm_layers(&self) -> &[NormLayer] {
        &self.norms
    }

    pub fn norm_layers_mut(&mut self) -> &mut [NormLayer] {
        &mut self.norms
    }

    pub fn norm_names(&self) -> &[String] {
        &self.norm_names
    }

    /// Zeroes the final prediction convolutions of both heads.
    pub fn zero_prediction_heads(&mut self) {
        for id in [self.global_head, self.refine_head] {
            self.convs[id].weight.data_mut().fill(0.0);
        }
    }

    fn conv(&self, g: &mut Graph, bind: &mut Binding, id: usize, x: Var) -> Result<Var> {
        let w = bind.get(g, self, id);
        let c = &self.convs[id];
        g.conv2d(x, w, c.stride, c.pad)
    }

    fn norm(
        &mut self,
        g: &mut Graph,
        bind: &mut Binding,
        j: usize,
        x: Var,
        conds: &[LightingCondition],
        mode: Mode,
    ) -> Result<Var> {
        let cond = self.norms[j].batch_condition(conds)?;
        let set = self.norms[j].affine_index(cond);
        let gamma = bind.get(g, self, self.norm_base[j] + 2 * set);
        let beta = bind.get(g, self, self.norm_base[j] + 2 * set + 1);
        self.norms[j].forward(g, x, gamma, beta, conds, mode)
    }

    /// Backbone plus heads. `conds` has one entry per sample; LSBN networks
    /// require them to agree.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bind: &mut Binding,
        input: Var,
        conds: &[LightingCondition],
        mode: Mode,
    ) -> Result<NetOutput> {
        let (n, c, h, w) = g.value(input).dims4()?;
        if c != 3 || (h, w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "network expects N x 3 x {} x {}, got {n} x {c} x {h} x {w}",
                self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        if conds.len() != n {
            return Err(Error::Shape(format!(
                "{} condition labels for a batch of {n}",
                conds.len()
            )));
        }
        let mut features = Vec::with_capacity(5);
        let (sc, sn) = self.stem;
        let x = self.conv(g, bind, sc, input)?;
        let x = self.norm(g, bind, sn, x, conds, mode)?;
        let mut x = g.relu(x);
        features.push((LayerTag::C1, x));

        let mut stage_out = Vec::with_capacity(4);
        for s in 0..self.stages.len() {
            for k in 0..self.stages[s].len() {
                let blk = self.stages[s][k].clone();
                let y = self.conv(g, bind, blk.conv1, x)?;
                let y = self.norm(g, bind, blk.norm1, y, conds, mode)?;
                let y = g.relu(y);
                let y = self.conv(g, bind, blk.conv2, y)?;
                let y = self.norm(g, bind, blk.norm2, y, conds, mode)?;
                let skip = match blk.shortcut {
                    Some((sc, sn)) => {
                        let z = self.conv(g, bind, sc, x)?;
                        self.norm(g, bind, sn, z, conds, mode)?
                    }
                    None => x,
                };
                let sum = g.add(y, skip)?;
                x = g.relu(sum);
            }
            features.push((LayerTag::ALL[s + 1], x));
            stage_out.push(x);
        }
        let heads = self.heads_forward(g, bind, [stage_out[0], stage_out[1], stage_out[2], stage_out[3]])?;
        Ok(NetOutput {
            global: heads.global,
            refine: heads.refine,
            pyramid: heads.pyramid,
            features,
        })
    }

    /// Pyramid heads over the four stage outputs (finest first).
    ///
    /// Global: 1x1 laterals summed top-down, prediction from the finest level.
    /// Refine: every level reduced, upsampled to the finest size, concatenated
    /// and predicted again.
    pub fn heads_forward(&self, g: &mut Graph, bind: &mut Binding, stages: [Var; 4]) -> Result<HeadOutput> {
        let mut lat = Vec::with_capacity(4);
        for (l, &s) in stages.iter().enumerate() {
            lat.push(self.conv(g, bind, self.laterals[l], s)?);
        }
        let mut pyramid = vec![lat[3]; 4];
        for l in (0..3).rev() {
            let up = upsample_to(g, pyramid[l + 1], lat[l])?;
            pyramid[l] = g.add(lat[l], up)?;
        }
        let global = self.conv(g, bind, self.global_head, pyramid[0])?;
        let mut parts = Vec::with_capacity(4);
        for (l, &p) in pyramid.iter().enumerate() {
            let r = self.conv(g, bind, self.refine_reduce[l], p)?;
            let r = g.relu(r);
            parts.push(upsample_to(g, r, pyramid[0])?);
        }
        let cat = g.concat(&parts)?;
        let refine = self.conv(g, bind, self.refine_head, cat)?;
        Ok(HeadOutput {
            global,
            refine,
            pyramid,
        })
    }

    /// Convenience forward without gradient tracking.
    pub fn predict(&mut self, input: &Tensor, cond: LightingCondition, mode: Mode) -> Result<Prediction> {
        let n = input.dims4()?.0;
        let mut g = Graph::new();
        let mut bind = Binding::new(self, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &mut bind, x, &vec![cond; n], mode)?;
        let features = out
            .features
            .iter()
            .map(|&(tag, v)| FeatureMap::new(g.value(v).clone(), tag, cond))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction {
            global: g.value(out.global).clone(),
            refine: g.value(out.refine).clone(),
            features,
        })
    }

    /// Tensor-level heads: returns `(global, refine, pyramid)`.
    pub fn heads(&self, stages: &[Tensor; 4]) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
        for (l, t) in stages.iter().enumerate() {
            let (_, c, _, _) = t.dims4()?;
            if c != self.cfg.stage_channels[l] {
                return Err(Error::Shape(format!(
                    "stage {} feature has {c} channels, expected {}",
                    l + 1,
                    self.cfg.stage_channels[l]
                )));
            }
        }
        let mut g = Graph::new();
        let mut bind = Binding::new(self, false);
        let vars = [0, 1, 2, 3].map(|l| g.constant(stages[l].clone()));
        let out = self.heads_forward(&mut g, &mut bind, vars)?;
        Ok((
            g.value(out.global).clone(),
            g.value(out.refine).clone(),
            out.pyramid.iter().map(|&p| g.value(p).clone()).collect(),
        ))
    }
}

fn upsample_to(g: &mut Graph, x: Var, like: Var) -> Result<Var> {
    let (_, _, h, w) = g.value(x).dims4()?;
    let (_, _, th, tw) = g.value(like).dims4()?;
    if th % h != 0 || tw % w != 0 {
        return Err(Error::Shape(format!(
            "cannot upsample {h}x{w} to {th}x{tw} by an integer factor"
        )));
    }
    g.upsample(x, th / h, tw / w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::NUM_JOINTS;
    use rand::Rng;

    fn random_input(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = cfg.input_size;
        Tensor::from_vec(&[n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn heatmaps_are_a_quarter_of_the_input() {
        let cfg = ModelConfig {
            stem_channels: 4,
            stage_channels: [4, 4, 4, 4],
            pyramid_channels: 4,
            refine_channels: 2,
            ..ModelConfig::default()
        };
        let mut net = PoseNet::new(cfg.clone()).unwrap();
        let pred = net
            .predict(&random_input(1, &cfg, 0), LightingCondition::WellLit, Mode::Eval)
            .unwrap();
        assert_eq!(pred.global.shape(), &[1, NUM_JOINTS, 64, 48]);
        assert_eq!(pred.refine.shape(), &[1, NUM_JOINTS, 64, 48]);
    }

    #[test]
    fn identical_affine_sets_make_conditions_indistinguishable() {
        let cfg = ModelConfig::tiny();
        let x = random_input(2, &cfg, 1);
        let mut net = PoseNet::new(cfg).unwrap();
        let a = net.clone().predict(&x, LightingCondition::LowLight, Mode::Train).unwrap();
        let b = net.predict(&x, LightingCondition::WellLit, Mode::Train).unwrap();
        assert_eq!(a.refine, b.refine);
        assert_eq!(a.global, b.global);
    }

    #[test]
    fn zeroed_heads_predict_zero() {
        let cfg = ModelConfig::tiny();
        let mut net = PoseNet::new(cfg.clone()).unwrap();
        net.zero_prediction_heads();
        let pred = net
            .predict(&random_input(2, &cfg, 2), LightingCondition::LowLight, Mode::Train)
            .unwrap();
        assert!(pred.global.data().iter().all(|&v| v == 0.0));
        assert!(pred.refine.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lsbn_overhead_is_one_affine_pair_per_channel() {
        let lsbn = PoseNet::new(ModelConfig::default()).unwrap();
        let plain = PoseNet::new(ModelConfig {
            norm: NormKind::Plain,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(lsbn.normalized_channels(), plain.normalized_channels());
        assert_eq!(
            lsbn.num_scalars() - plain.num_scalars(),
            2 * plain.normalized_channels()
        );
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut net = PoseNet::new(ModelConfig::tiny()).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 24]);
        assert!(matches!(
            net.predict(&x, LightingCondition::WellLit, Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let x = random_input(2, &cfg, 3);
        let a = PoseNet::new(cfg.clone()).unwrap().predict(&x, LightingCondition::LowLight, Mode::Train).unwrap();
        let b = PoseNet::new(cfg).unwrap().predict(&x, LightingCondition::LowLight, Mode::Train).unwrap();
        assert_eq!(a.refine, b.refine);
    }

    #[test]
    fn global_levels_depend_only_on_coarser_stages() {
        let cfg = ModelConfig::tiny();
        let net = PoseNet::new(cfg.clone()).unwrap();
        let mut sizes = [(0, 0); 4];
        let (mut h, mut w) = (cfg.input_size.0 / 2, cfg.input_size.1 / 2);
        for l in 0..4 {
            h /= cfg.stage_strides[l];
            w /= cfg.stage_strides[l];
            sizes[l] = (h, w);
        }
        for live in 0..4 {
            let stages = [0, 1, 2, 3].map(|l| {
                let (sh, sw) = sizes[l];
                let c = cfg.stage_channels[l];
                if l == live {
                    Tensor::full(&[1, c, sh, sw], 0.5)
                } else {
                    Tensor::zeros(&[1, c, sh, sw])
                }
            });
            let (_, _, pyramid) = net.heads(&stages).unwrap();
            for (l, p) in pyramid.iter().enumerate() {
                let nonzero = p.data().iter().any(|&v| v != 0.0);
                assert_eq!(nonzero, l <= live, "level P{} with only R{} live", l + 1, live + 1);
            }
        }
        let zeros = [0, 1, 2, 3].map(|l| {
            let (sh, sw) = sizes[l];
            Tensor::zeros(&[1, cfg.stage_channels[l], sh, sw])
        });
        let (gl, rf, _) = net.heads(&zeros).unwrap();
        assert!(gl.data().iter().chain(rf.data()).all(|&v| v == 0.0));
        assert_eq!(gl.shape()[1], NUM_JOINTS);
        assert_eq!(rf.shape()[1], NUM_JOINTS);
    }
}
