use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::builder::GraphBuilder;
use crate::conv::ConvGeom;
use crate::error::{NnError, Result};
use crate::graph::{LayerGraph, Mode, NodeId, Tape};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Deconvnet,
    UNet,
    Pspnet,
    VNet,
    Deepmedic,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Deconvnet, Arch::UNet, Arch::Pspnet, Arch::VNet, Arch::Deepmedic];

    pub fn key(self) -> &'static str {
        match self {
            Arch::Deconvnet => "deconvnet",
            Arch::UNet => "u_net",
            Arch::Pspnet => "pspnet",
            Arch::VNet => "v_net",
            Arch::Deepmedic => "deepmedic",
        }
    }

    pub fn is_3d(self) -> bool {
        matches!(self, Arch::VNet | Arch::Deepmedic)
    }

    /// Encoder–decoder archs need every downsampled extent to stay integral.
    pub fn needs_divisibility(self) -> bool {
        matches!(self, Arch::Deconvnet | Arch::UNet | Arch::VNet)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Arch {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| NnError::Config(format!("unknown arch {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Batchnorm,
    Dropout,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Overrides the derived display name (e.g. `deconvnet_big`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub norm: Norm,
    pub pyramid_bins: Vec<usize>,
    pub low_res_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(Arch::VNet)
    }
}

impl ModelConfig {
    /// Small defaults suitable for CPU experiments.
    pub fn new(arch: Arch) -> Self {
        ModelConfig {
            arch,
            name: None,
            num_classes: 2,
            in_channels: 1,
            base_width: 8,
            depth: 3,
            dropout_rate: 0.0,
            norm: Norm::Batchnorm,
            pyramid_bins: vec![1, 2, 3, 6],
            low_res_factor: 3,
        }
    }

    /// Width and depth aimed at the published parameter counts.
    pub fn paper_scale(arch: Arch) -> Self {
        let mut c = ModelConfig::new(arch);
        match arch {
            Arch::Deconvnet => {
                c.name = Some("deconvnet_big".into());
                c.base_width = 36;
                c.depth = 5;
            }
            Arch::UNet => {
                c.base_width = 57;
                c.depth = 5;
            }
            Arch::Pspnet => {
                c.name = Some("pspnet_2d".into());
                c.base_width = 54;
                c.depth = 5;
            }
            Arch::VNet => {
                c.base_width = 14;
                c.depth = 5;
            }
            Arch::Deepmedic => {
                c.base_width = 32;
                c.depth = 4;
            }
        }
        c
    }

    /// `v_net` with dropout in place of batch normalisation.
    pub fn v_net_dropout(rate: f64) -> Self {
        ModelConfig {
            norm: Norm::Dropout,
            dropout_rate: rate,
            ..ModelConfig::paper_scale(Arch::VNet)
        }
    }

    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.norm {
            Norm::Dropout => format!("{}_dropout{}", self.arch.key(), self.dropout_rate),
            _ => self.arch.key().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.base_width < 1 || self.in_channels < 1 {
            return bad("base_width and in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.arch == Arch::Pspnet && (self.pyramid_bins.is_empty() || self.pyramid_bins.contains(&0)) {
            return bad("pyramid_bins must be non-empty and positive".into());
        }
        if self.arch == Arch::Deepmedic && self.low_res_factor < 2 {
            return bad("low_res_factor must be at least 2".into());
        }
        Ok(())
    }

    /// Required divisor of each spatial extent `(D, H, W)`.
    pub fn spatial_divisor(&self) -> [usize; 3] {
        let f = if self.arch.needs_divisibility() { 1 << (self.depth - 1) } else { 1 };
        if self.arch.is_3d() {
            [f; 3]
        } else {
            [1, f, f]
        }
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        if !self.arch.is_3d() && spatial[0] != 1 {
            return Err(NnError::Shape(format!(
                "{} is a 2D model and takes depth-1 inputs, got {spatial:?}",
                self.arch
            )));
        }
        let div = self.spatial_divisor();
        if spatial.iter().zip(div).any(|(&s, d)| s == 0 || s % d != 0) {
            return Err(NnError::Shape(format!(
                "input extent {spatial:?} is not divisible by {div:?} for {} with depth {}",
                self.arch, self.depth
            )));
        }
        Ok(())
    }
}

/// Geometry helpers for 2D (`D = 1`) or 3D kernels.
#[derive(Clone, Copy)]
struct Dims {
    three_d: bool,
}

impl Dims {
    fn k3(self) -> ConvGeom {
        if self.three_d {
            ConvGeom::new([3; 3], [1; 3], [1; 3])
        } else {
            ConvGeom::new([1, 3, 3], [1; 3], [0, 1, 1])
        }
    }

    fn k3_stride2(self) -> ConvGeom {
        if self.three_d {
            ConvGeom::new([3; 3], [2; 3], [1; 3])
        } else {
            ConvGeom::new([1, 3, 3], [1, 2, 2], [0, 1, 1])
        }
    }

    fn k2_stride2(self) -> ConvGeom {
        if self.three_d {
            ConvGeom::new([2; 3], [2; 3], [0; 3])
        } else {
            ConvGeom::new([1, 2, 2], [1, 2, 2], [0; 3])
        }
    }

    fn k1(self) -> ConvGeom {
        ConvGeom::new([1; 3], [1; 3], [0; 3])
    }

    fn k1_stride2(self) -> ConvGeom {
        if self.three_d {
            ConvGeom::new([1; 3], [2; 3], [0; 3])
        } else {
            ConvGeom::new([1; 3], [1, 2, 2], [0; 3])
        }
    }

    fn factor(self, f: usize) -> [usize; 3] {
        if self.three_d {
            [f; 3]
        } else {
            [1, f, f]
        }
    }
}

struct Ctx<'a> {
    cfg: &'a ModelConfig,
    dims: Dims,
}

impl Ctx<'_> {
    fn norm(&self, b: &mut GraphBuilder, x: NodeId) -> NodeId {
        match self.cfg.norm {
            Norm::Batchnorm => b.batch_norm(x),
            Norm::Dropout => b.dropout(x, self.cfg.dropout_rate),
            Norm::None => x,
        }
    }

    /// conv → norm → relu
    fn unit(&self, b: &mut GraphBuilder, x: NodeId, out: usize, geom: ConvGeom) -> NodeId {
        let bias = self.cfg.norm != Norm::Batchnorm;
        let y = b.conv(x, out, geom, bias);
        let y = self.norm(b, y);
        b.relu(y)
    }

    fn up_unit(&self, b: &mut GraphBuilder, x: NodeId, out: usize) -> NodeId {
        let bias = self.cfg.norm != Norm::Batchnorm;
        let y = b.conv_transpose(x, out, self.dims.k2_stride2(), bias);
        let y = self.norm(b, y);
        b.relu(y)
    }

    /// `n` 3×3 units at `width`; with `residual`, the stage entry is added to
    /// its output.
    fn stage(&self, b: &mut GraphBuilder, x: NodeId, width: usize, n: usize, residual: bool) -> NodeId {
        let (entry, mut left) = if b.channels(x) == width {
            (x, n)
        } else {
            (self.unit(b, x, width, self.dims.k3()), n.saturating_sub(1))
        };
        let mut y = entry;
        while left > 0 {
            y = self.unit(b, y, width, self.dims.k3());
            left -= 1;
        }
        if residual && y != entry {
            y = b.add(y, entry);
        }
        y
    }

    fn head(&self, b: &mut GraphBuilder, x: NodeId) -> NodeId {
        let logits = b.classifier(x, self.cfg.num_classes, self.dims.k1());
        b.softmax(logits)
    }
}

struct EncDec {
    skips: bool,
    residual: bool,
    down: fn(Dims) -> ConvGeom,
    convs: fn(usize) -> usize,
}

fn build_encdec(ctx: &Ctx, b: &mut GraphBuilder, spec: EncDec) -> NodeId {
    let depth = ctx.cfg.depth;
    let width = |s: usize| ctx.cfg.base_width << s;
    let mut h = b.input();
    let mut encoder = Vec::with_capacity(depth);
    for s in 0..depth {
        let scope = if s + 1 == depth { "bottleneck".to_string() } else { format!("enc{s}") };
        h = b.scoped(&scope, |b| {
            let mut h = h;
            if s > 0 {
                h = ctx.unit(b, h, width(s), (spec.down)(ctx.dims));
            }
            ctx.stage(b, h, width(s), (spec.convs)(s), spec.residual)
        });
        encoder.push(h);
    }
    for s in (0..depth - 1).rev() {
        h = b.scoped(&format!("dec{s}"), |b| {
            let up = ctx.up_unit(b, h, width(s));
            let x = if spec.skips { b.concat("skip", &[up, encoder[s]]) } else { up };
            let y = ctx.stage(b, x, width(s), (spec.convs)(s), false);
            if spec.residual {
                b.add(y, up)
            } else {
                y
            }
        });
    }
    b.scoped("head", |b| ctx.head(b, h))
}

fn build_pspnet(ctx: &Ctx, b: &mut GraphBuilder) -> NodeId {
    let d = ctx.dims;
    let bn = ctx.cfg.norm != Norm::Batchnorm;
    let x = b.input();
    let mut h = b.scoped("stem", |b| ctx.unit(b, x, ctx.cfg.base_width, d.k3()));
    for s in 0..ctx.cfg.depth {
        let width = ctx.cfg.base_width << s;
        h = b.scoped(&format!("res{s}"), |b| {
            let (g1, gs) = if s == 0 { (d.k3(), d.k1()) } else { (d.k3_stride2(), d.k1_stride2()) };
            let y = ctx.unit(b, h, width, g1);
            let y = b.conv(y, width, d.k3(), bn);
            let y = ctx.norm(b, y);
            let shortcut = if s == 0 && b.channels(h) == width {
                h
            } else {
                let p = b.conv(h, width, gs, bn);
                ctx.norm(b, p)
            };
            let y = b.add(y, shortcut);
            b.relu(y)
        });
    }
    let feat = h;
    let c = b.channels(feat);
    let branch_width = (c / ctx.cfg.pyramid_bins.len()).max(1);
    let fused = b.scoped("pyramid", |b| {
        let mut parts = vec![feat];
        for &bins in &ctx.cfg.pyramid_bins {
            let p = b.adaptive_pool(feat, bins);
            let p = b.conv(p, branch_width, d.k1(), true);
            let p = b.relu(p);
            parts.push(b.resize(p, feat));
        }
        let cat = b.concat("fuse", &parts);
        ctx.unit(b, cat, c, d.k3())
    });
    b.scoped("head", |b| {
        let logits = b.classifier(fused, ctx.cfg.num_classes, d.k1());
        let logits = b.resize(logits, x);
        b.softmax(logits)
    })
}

fn build_deepmedic(ctx: &Ctx, b: &mut GraphBuilder) -> NodeId {
    let base = ctx.cfg.base_width;
    let width = |s: usize| base + base * s / 2;
    let x = b.input();
    let pathway = |b: &mut GraphBuilder, mut h: NodeId| {
        for s in 0..ctx.cfg.depth {
            h = b.scoped(&format!("stage{s}"), |b| ctx.stage(b, h, width(s), 2, true));
        }
        h
    };
    let high = b.scoped("high", |b| pathway(b, x));
    let low = b.scoped("low", |b| {
        let l = b.avg_pool(x, ctx.dims.factor(ctx.cfg.low_res_factor));
        let l = pathway(b, l);
        b.resize(l, high)
    });
    let fc = 2 * width(ctx.cfg.depth - 1);
    b.scoped("fusion", |b| {
        let cat = b.concat("fuse", &[high, low]);
        let f = ctx.unit(b, cat, fc, ctx.dims.k1());
        let f = ctx.unit(b, f, fc, ctx.dims.k1());
        ctx.head(b, f)
    })
}

/// A layer graph with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    graph: LayerGraph,
    params: ParamStore,
}

/// Build the graph for `config` and initialise weights from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let ctx = Ctx {
        cfg: config,
        dims: Dims {
            three_d: config.arch.is_3d(),
        },
    };
    let mut b = GraphBuilder::new(config.in_channels, seed);
    let out = match config.arch {
        Arch::Deconvnet => build_encdec(
            &ctx,
            &mut b,
            EncDec {
                skips: false,
                residual: false,
                down: Dims::k3_stride2,
                convs: |_| 2,
            },
        ),
        Arch::UNet => build_encdec(
            &ctx,
            &mut b,
            EncDec {
                skips: true,
                residual: false,
                down: Dims::k3_stride2,
                convs: |_| 2,
            },
        ),
        Arch::VNet => build_encdec(
            &ctx,
            &mut b,
            EncDec {
                skips: true,
                residual: true,
                down: Dims::k2_stride2,
                convs: |s| (s + 1).min(3),
            },
        ),
        Arch::Pspnet => build_pspnet(&ctx, &mut b),
        Arch::Deepmedic => build_deepmedic(&ctx, &mut b),
    };
    let (graph, params) = b.finish(out)?;
    Ok(Model {
        config: config.clone(),
        graph,
        params,
    })
}

pub fn count_parameters(model: &Model) -> usize {
    model.params.count()
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.count()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(NnError::Shape(format!(
                "model takes {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        self.config.check_input(x.spatial())
    }

    /// Evaluation-mode class probabilities `(N, K, D, H, W)`.
    pub fn forward(&self, x: Tensor) -> Result<Tensor> {
        self.check(&x)?;
        Ok(self.graph.forward(&self.params, x, Mode::Eval)?.into_output())
    }

    /// Training-mode pass; `seed` fixes the dropout masks.
    pub fn forward_train(&self, x: Tensor, seed: u64) -> Result<Tape> {
        self.check(&x)?;
        self.graph.forward(&self.params, x, Mode::Train { seed })
    }

    /// Parameter gradients given `∂loss/∂probabilities`.
    pub fn backward(&self, tape: &Tape, grad_probs: Tensor) -> Result<Grads> {
        self.graph.backward(&self.params, tape, grad_probs)
    }

    pub fn update_running_stats(&mut self, tape: &Tape) {
        self.graph.update_running_stats(&mut self.params, tape);
    }
}
