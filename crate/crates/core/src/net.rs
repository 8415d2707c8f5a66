//! The detector network: a switchable micro-backbone, channel+spatial
//! attention on each pyramid input, a three-level FPN, and shared heads
//! that predict a plate score, box offsets and four corner offsets per
//! anchor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Param, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.1;
pub const GN_GROUPS: usize = 4;
pub const GN_EPS: f32 = 1e-5;
pub const ATTENTION_REDUCTION: usize = 4;
/// Prior probability the score head starts at.
pub const SCORE_PRIOR: f32 = 0.01;
/// Std of the box and corner head weights.
pub const HEAD_INIT_STD: f32 = 0.01;
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid network config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("expected input images of shape [N, 3, {expected}, {expected}], got {got:?}")]
    InputSize { expected: usize, got: Vec<usize> },
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    /// Two 3x3 convolutions plus a projected skip per stage.
    Residual,
    /// Depthwise 3x3 followed by pointwise 1x1 per stage.
    Lightweight,
}

impl Backbone {
    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Residual => "residual",
            Backbone::Lightweight => "lightweight",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "residual" => Some(Backbone::Residual),
            "lightweight" => Some(Backbone::Lightweight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub backbone: Backbone,
    pub attention: bool,
    pub stage_channels: [usize; 4],
    pub fpn_dim: usize,
    pub anchors_per_cell: usize,
    pub input_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Residual,
            attention: true,
            stage_channels: [8, 16, 32, 64],
            fpn_dim: 32,
            anchors_per_cell: 2,
            input_size: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let mut problems = Vec::new();
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            problems.push(format!("input_size {} is not a positive multiple of 32", self.input_size));
        }
        if self.fpn_dim == 0 || !self.fpn_dim.is_multiple_of(GN_GROUPS) {
            problems.push(format!("fpn_dim {} must be a positive multiple of {GN_GROUPS}", self.fpn_dim));
        }
        if self.anchors_per_cell == 0 {
            problems.push("anchors_per_cell must be at least 1".to_string());
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % GN_GROUPS != 0 {
                problems.push(format!("stage_channels[{i}] = {c} must be a positive multiple of {GN_GROUPS}"));
            } else if i >= 1 && self.attention && c % ATTENTION_REDUCTION != 0 {
                problems.push(format!(
                    "stage_channels[{i}] = {c} not divisible by attention reduction {ATTENTION_REDUCTION}"
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NetError::InvalidConfig(problems))
        }
    }

    pub fn level_sizes(&self) -> [usize; 3] {
        LEVEL_STRIDES.map(|s| self.input_size / s)
    }

    pub fn total_anchors(&self) -> usize {
        self.level_sizes()
            .iter()
            .map(|s| s * s * self.anchors_per_cell)
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
enum Stage {
    Residual {
        conv1: Conv,
        gn1: Norm,
        conv2: Conv,
        gn2: Norm,
        skip: Conv,
    },
    Lightweight {
        dw: Conv,
        gn1: Norm,
        pw: Conv,
        gn2: Norm,
    },
}

#[derive(Debug, Clone)]
struct Attention {
    fc1: Dense,
    fc2: Dense,
    spatial: Conv,
}

#[derive(Debug, Clone)]
struct Layers {
    stem: Conv,
    stem_gn: Norm,
    stages: Vec<Stage>,
    attention: Vec<Attention>,
    lateral: Vec<Conv>,
    smooth: Vec<Conv>,
    smooth_gn: Vec<Norm>,
    score: Conv,
    bbox: Conv,
    corner: Conv,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    attention_rng: ChaCha8Rng,
}

enum Init {
    He,
    Normal(f32),
    Const(f32),
}

impl Builder {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init, attention: bool) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Const(v) => vec![v; n],
            Init::He | Init::Normal(_) => {
                let std = match init {
                    Init::Normal(s) => s,
                    _ => (2.0 / shape[1..].iter().product::<usize>() as f32).sqrt(),
                };
                let dist = Normal::new(0.0f32, std).expect("positive std");
                let rng = if attention {
                    &mut self.attention_rng
                } else {
                    &mut self.rng
                };
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        let t = Tensor::new(shape, data).expect("builder shapes are consistent");
        self.params.push(Param::new(name, t));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init, bias: f32) -> Conv {
        let w = self.tensor(format!("{name}.weight"), &[cout, cin, k, k], init, false);
        let b = self.tensor(format!("{name}.bias"), &[cout], Init::Const(bias), false);
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn depthwise(&mut self, name: &str, c: usize, stride: usize) -> Conv {
        let w = self.tensor(format!("{name}.weight"), &[c, 1, 3, 3], Init::He, false);
        let b = self.tensor(format!("{name}.bias"), &[c], Init::Const(0.0), false);
        Conv { w, b, stride, pad: 1 }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.tensor(format!("{name}.gamma"), &[c], Init::Const(1.0), false),
            beta: self.tensor(format!("{name}.beta"), &[c], Init::Const(0.0), false),
        }
    }

    fn attention(&mut self, name: &str, c: usize) -> Attention {
        let hidden = c / ATTENTION_REDUCTION;
        let fc1 = Dense {
            w: self.tensor(format!("{name}.fc1.weight"), &[hidden, c], Init::He, true),
            b: self.tensor(format!("{name}.fc1.bias"), &[hidden], Init::Const(0.0), true),
        };
        let fc2 = Dense {
            w: self.tensor(format!("{name}.fc2.weight"), &[c, hidden], Init::Const(0.0), true),
            b: self.tensor(format!("{name}.fc2.bias"), &[c], Init::Const(0.0), true),
        };
        let spatial = Conv {
            w: self.tensor(format!("{name}.spatial.weight"), &[1, 2, 3, 3], Init::Const(0.0), true),
            b: self.tensor(format!("{name}.spatial.bias"), &[1], Init::Const(0.0), true),
            stride: 1,
            pad: 1,
        };
        Attention { fc1, fc2, spatial }
    }
}

/// Per-level head outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMaps {
    pub stride: usize,
    /// `[N, A, H, W]` logits.
    pub score: Tensor,
    /// `[N, 4A, H, W]`, channel `a*4 + k`.
    pub bbox: Tensor,
    /// `[N, 8A, H, W]`, channel `a*8 + k`.
    pub corner: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidMaps {
    pub batch: usize,
    pub anchors_per_cell: usize,
    pub levels: Vec<LevelMaps>,
}

impl PyramidMaps {
    pub fn level_extent(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level].score.shape();
        (s[2], s[3])
    }
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub params: Vec<Var>,
    /// `(score, bbox, corner)` per level, finest first.
    pub heads: Vec<(Var, Var, Var)>,
    /// Backbone features before and after attention gating, per level.
    pub gated: Vec<(Var, Var)>,
}

impl ForwardVars {
    pub fn maps(&self, g: &Graph, anchors_per_cell: usize) -> PyramidMaps {
        let levels = self
            .heads
            .iter()
            .zip(LEVEL_STRIDES)
            .map(|(&(s, b, c), stride)| LevelMaps {
                stride,
                score: g.value(s).clone(),
                bbox: g.value(b).clone(),
                corner: g.value(c).clone(),
            })
            .collect::<Vec<_>>();
        PyramidMaps {
            batch: levels[0].score.shape()[0],
            anchors_per_cell,
            levels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: NetConfig,
    params: Vec<Param>,
    layers: Layers,
}

fn attention_seed(seed: u64) -> u64 {
    seed ^ 0x6174_7465_6e74_696f
}

impl Model {
    /// Deterministically initialized model.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            attention_rng: ChaCha8Rng::seed_from_u64(attention_seed(seed)),
        };
        let ch = config.stage_channels;
        let stem = b.conv("backbone.stem.conv", 3, ch[0], 3, 2, Init::He, 0.0);
        let stem_gn = b.norm("backbone.stem.gn", ch[0]);
        let mut stages = Vec::new();
        for (i, &cout) in ch.iter().enumerate() {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            let name = format!("backbone.stage{}", i + 1);
            stages.push(match config.backbone {
                Backbone::Residual => Stage::Residual {
                    conv1: b.conv(&format!("{name}.conv1"), cin, cout, 3, 2, Init::He, 0.0),
                    gn1: b.norm(&format!("{name}.gn1"), cout),
                    conv2: b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, Init::He, 0.0),
                    gn2: b.norm(&format!("{name}.gn2"), cout),
                    skip: b.conv(&format!("{name}.skip"), cin, cout, 1, 2, Init::He, 0.0),
                },
                Backbone::Lightweight => Stage::Lightweight {
                    dw: b.depthwise(&format!("{name}.dw"), cin, 2),
                    gn1: b.norm(&format!("{name}.gn1"), cin),
                    pw: b.conv(&format!("{name}.pw"), cin, cout, 1, 1, Init::He, 0.0),
                    gn2: b.norm(&format!("{name}.gn2"), cout),
                },
            });
        }
        let pyramid_channels = [ch[1], ch[2], ch[3]];
        let mut attention = Vec::new();
        if config.attention {
            for (l, &c) in pyramid_channels.iter().enumerate() {
                attention.push(b.attention(&format!("attention.c{}", l + 3), c));
            }
        }
        let d = config.fpn_dim;
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        let mut smooth_gn = Vec::new();
        for (l, &c) in pyramid_channels.iter().enumerate() {
            lateral.push(b.conv(&format!("fpn.lateral{}", l + 3), c, d, 1, 1, Init::He, 0.0));
        }
        for l in 0..3 {
            smooth.push(b.conv(&format!("fpn.smooth{}.conv", l + 3), d, d, 3, 1, Init::He, 0.0));
            smooth_gn.push(b.norm(&format!("fpn.smooth{}.gn", l + 3), d));
        }
        let a = config.anchors_per_cell;
        let prior_bias = -((1.0 - SCORE_PRIOR) / SCORE_PRIOR).ln();
        // Zero score weights pin every fresh score to the prior regardless of input.
        let score = b.conv("head.score", d, a, 3, 1, Init::Const(0.0), prior_bias);
        let bbox = b.conv("head.box", d, 4 * a, 3, 1, Init::Normal(HEAD_INIT_STD), 0.0);
        let corner = b.conv("head.corner", d, 8 * a, 3, 1, Init::Normal(HEAD_INIT_STD), 0.0);
        Ok(Self {
            config: config.clone(),
            params: b.params,
            layers: Layers {
                stem,
                stem_gn,
                stages,
                attention,
                lateral,
                smooth,
                smooth_gn,
                score,
                bbox,
                corner,
            },
        })
    }

    /// Builds a model for `config` and overwrites its parameters with
    /// `tensors`. Every parameter must be supplied exactly once.
    pub fn from_tensors(config: &NetConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, NetError> {
        let mut model = Self::build(config, 0)?;
        let mut seen = vec![false; model.params.len()];
        for (name, t) in tensors {
            let idx = model
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| NetError::Tensor {
                    name: name.clone(),
                    msg: "not a parameter of this configuration".into(),
                })?;
            if seen[idx] {
                return Err(NetError::Tensor {
                    name,
                    msg: "supplied twice".into(),
                });
            }
            if model.params[idx].tensor.shape() != t.shape() {
                return Err(NetError::Tensor {
                    msg: format!(
                        "shape {:?} does not match expected {:?}",
                        t.shape(),
                        model.params[idx].tensor.shape()
                    ),
                    name,
                });
            }
            seen[idx] = true;
            model.params[idx] = Param::new(name, t);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(NetError::Tensor {
                name: model.params[i].name.clone(),
                msg: "missing".into(),
            });
        }
        Ok(model)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Records the forward pass for NCHW `images` on `g`. Parameter leaves
    /// track gradients iff `train`.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, train: bool) -> Result<ForwardVars, NetError> {
        let s = self.config.input_size;
        match images.shape() {
            [_, 3, h, w] if *h == s && *w == s => {}
            other => {
                return Err(NetError::InputSize {
                    expected: s,
                    got: other.to_vec(),
                })
            }
        }
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone().with_requires_grad(train)))
            .collect();
        let x = g.constant(images.clone());
        let n = images.shape()[0];
        let l = &self.layers;

        let conv = |g: &mut Graph, x: Var, c: &Conv| g.conv2d(x, pv[c.w], Some(pv[c.b]), c.stride, c.pad);
        let norm_act = |g: &mut Graph, x: Var, nm: &Norm| -> Result<Var, AutodiffError> {
            let y = g.group_norm(x, pv[nm.gamma], pv[nm.beta], GN_GROUPS, GN_EPS)?;
            g.leaky_relu(y, LEAKY_SLOPE)
        };

        let mut h = conv(g, x, &l.stem)?;
        h = norm_act(g, h, &l.stem_gn)?;
        let mut feats = Vec::new();
        for (i, stage) in l.stages.iter().enumerate() {
            h = match stage {
                Stage::Residual {
                    conv1,
                    gn1,
                    conv2,
                    gn2,
                    skip,
                } => {
                    let a = conv(g, h, conv1)?;
                    let a = norm_act(g, a, gn1)?;
                    let a = conv(g, a, conv2)?;
                    let a = g.group_norm(a, pv[gn2.gamma], pv[gn2.beta], GN_GROUPS, GN_EPS)?;
                    let sk = conv(g, h, skip)?;
                    let sum = g.add(a, sk)?;
                    g.leaky_relu(sum, LEAKY_SLOPE)?
                }
                Stage::Lightweight { dw, gn1, pw, gn2 } => {
                    let a = g.depthwise_conv2d(h, pv[dw.w], Some(pv[dw.b]), dw.stride, dw.pad)?;
                    let a = norm_act(g, a, gn1)?;
                    let a = conv(g, a, pw)?;
                    norm_act(g, a, gn2)?
                }
            };
            if i >= 1 {
                feats.push(h);
            }
        }

        let mut gated = Vec::new();
        for (lvl, f) in feats.iter_mut().enumerate() {
            let pre = *f;
            if let Some(att) = l.attention.get(lvl) {
                let cg = channel_attention_gate(g, pre, att, &pv)?;
                let x1 = g.mul_broadcast(pre, cg)?;
                let sg = spatial_attention_gate(g, x1, att, &pv)?;
                *f = g.mul_broadcast(x1, sg)?;
            }
            gated.push((pre, *f));
        }

        let lat: Vec<Var> = feats
            .iter()
            .zip(&l.lateral)
            .map(|(&f, c)| conv(g, f, c))
            .collect::<Result<_, _>>()?;
        let p5 = lat[2];
        let up5 = g.upsample_nearest2(p5)?;
        let p4 = g.add(lat[1], up5)?;
        let up4 = g.upsample_nearest2(p4)?;
        let p3 = g.add(lat[0], up4)?;

        let mut heads = Vec::new();
        for (lvl, p) in [p3, p4, p5].into_iter().enumerate() {
            let sm = conv(g, p, &l.smooth[lvl])?;
            let sm = norm_act(g, sm, &l.smooth_gn[lvl])?;
            let score = conv(g, sm, &l.score)?;
            let bbox = conv(g, sm, &l.bbox)?;
            let corner = conv(g, sm, &l.corner)?;
            heads.push((score, bbox, corner));
        }
        debug_assert_eq!(g.value(heads[0].0).shape()[0], n);
        Ok(ForwardVars {
            params: pv,
            heads,
            gated,
        })
    }

    /// Inference-only forward pass.
    pub fn predict(&self, images: &Tensor) -> Result<PyramidMaps, NetError> {
        let mut g = Graph::new();
        let fv = self.forward(&mut g, images, false)?;
        Ok(fv.maps(&g, self.config.anchors_per_cell))
    }

    /// Copies parameter gradients from a finished backward pass into each
    /// parameter's gradient buffer.
    pub fn load_grads(&mut self, g: &Graph, fv: &ForwardVars) {
        for (p, &v) in self.params.iter_mut().zip(&fv.params) {
            let grad = g.grad(v).map(<[f32]>::to_vec);
            p.tensor.set_grad(grad).expect("graph grads match parameter shapes");
        }
    }
}

fn channel_attention_gate(g: &mut Graph, x: Var, att: &Attention, pv: &[Var]) -> Result<Var, AutodiffError> {
    let shape = g.value(x).shape().to_vec();
    let avg = g.global_avg_pool(x)?;
    let max = g.global_max_pool(x)?;
    let mut branch = |v: Var| -> Result<Var, AutodiffError> {
        let hdn = g.linear(v, pv[att.fc1.w], Some(pv[att.fc1.b]))?;
        let hdn = g.leaky_relu(hdn, LEAKY_SLOPE)?;
        g.linear(hdn, pv[att.fc2.w], Some(pv[att.fc2.b]))
    };
    let a = branch(avg)?;
    let m = branch(max)?;
    let s = g.add(a, m)?;
    let s = g.reshape(s, &[shape[0], shape[1], 1, 1])?;
    g.sigmoid(s)
}

fn spatial_attention_gate(g: &mut Graph, x: Var, att: &Attention, pv: &[Var]) -> Result<Var, AutodiffError> {
    let mean = g.channel_mean(x)?;
    let max = g.channel_max(x)?;
    let cat = g.concat_channels(&[mean, max])?;
    let s = g.conv2d(cat, pv[att.spatial.w], Some(pv[att.spatial.b]), 1, 1)?;
    g.sigmoid(s)
}

/// Channel attention as a standalone block. `fc1: [C/r, C]`,
/// `fc2: [C, C/r]`. Returns the `[N, C, 1, 1]` gate.
pub fn channel_attention(
    g: &mut Graph,
    x: Var,
    fc1: (Var, Var),
    fc2: (Var, Var),
) -> Result<Var, AutodiffError> {
    let c = g.value(x).shape().get(1).copied().unwrap_or(0);
    if c % ATTENTION_REDUCTION != 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "channel_attention",
            msg: format!("{c} channels not divisible by reduction {ATTENTION_REDUCTION}"),
        });
    }
    let pv = [fc1.0, fc1.1, fc2.0, fc2.1];
    let att = Attention {
        fc1: Dense { w: 0, b: 1 },
        fc2: Dense { w: 2, b: 3 },
        spatial: Conv {
            w: 0,
            b: 0,
            stride: 1,
            pad: 1,
        },
    };
    channel_attention_gate(g, x, &att, &pv)
}

/// Spatial attention as a standalone block with a `[1, 2, 3, 3]` kernel.
/// Returns the `[N, 1, H, W]` gate.
pub fn spatial_attention(g: &mut Graph, x: Var, conv: (Var, Var)) -> Result<Var, AutodiffError> {
    let pv = [conv.0, conv.1];
    let att = Attention {
        fc1: Dense { w: 0, b: 0 },
        fc2: Dense { w: 0, b: 0 },
        spatial: Conv {
            w: 0,
            b: 1,
            stride: 1,
            pad: 1,
        },
    };
    spatial_attention_gate(g, x, &att, &pv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs_enumerate_every_problem() {
        let cfg = NetConfig {
            input_size: 48,
            fpn_dim: 0,
            anchors_per_cell: 0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(NetError::InvalidConfig(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
        assert!(NetConfig::default().validate().is_ok());
    }

    #[test]
    fn default_anchor_total() {
        assert_eq!(NetConfig::default().total_anchors(), 168);
    }

    #[test]
    fn parameter_names_unique() {
        let m = Model::build(&NetConfig::default(), 1).unwrap();
        let mut names: Vec<_> = m.params().iter().map(|p| p.name.as_str()).collect();
        names.sort();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());
        assert!(m.params().iter().all(|p| p.momentum.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let m = Model::build(&NetConfig::default(), 1).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 3, 32, 32])).unwrap_err();
        assert!(matches!(err, NetError::InputSize { expected: 64, .. }));
    }
}
