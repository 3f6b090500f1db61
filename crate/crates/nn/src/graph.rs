//! Declarative layer graph with a recorded forward pass and reverse-mode
//! gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, ConvGeom};
use crate::error::{NnError, Result};
use crate::ops::{self, AxisMap, BnStats, SpatialMap};
use crate::params::{BufferId, Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Input,
    Conv {
        out_channels: usize,
        geom: ConvGeom,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    ConvTranspose {
        out_channels: usize,
        geom: ConvGeom,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
        eps: f64,
        momentum: f64,
    },
    /// Inverted dropout; identity in evaluation mode.
    Dropout { rate: f64 },
    Relu,
    Add,
    Concat,
    /// Average over non-overlapping windows; partial border windows are kept.
    AvgPool { factor: [usize; 3] },
    /// Average pooling to a fixed number of bins per non-singleton axis.
    AdaptiveAvgPool { bins: usize },
    /// Linear resampling of input 0 to the spatial shape of input 1.
    Resize,
    /// Softmax over channels.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Conv,
    ConvTranspose,
    BatchNorm,
    Dropout,
    Relu,
    Add,
    Concat,
    AvgPool,
    AdaptiveAvgPool,
    Resize,
    Softmax,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Conv { .. } => OpKind::Conv,
            Op::ConvTranspose { .. } => OpKind::ConvTranspose,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Relu => OpKind::Relu,
            Op::Add => OpKind::Add,
            Op::Concat => OpKind::Concat,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::AdaptiveAvgPool { .. } => OpKind::AdaptiveAvgPool,
            Op::Resize => OpKind::Resize,
            Op::Softmax => OpKind::Softmax,
        }
    }
}

impl OpKind {
    /// Fixed pooling or interpolation that changes resolution without weights.
    pub fn is_pool_or_upsample(self) -> bool {
        matches!(self, OpKind::AvgPool | OpKind::AdaptiveAvgPool | OpKind::Resize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Slash-separated scope path, e.g. `high/stage1/conv0`.
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Per-sample shape `(C, D, H, W)`.
pub type NodeShape = [usize; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout masks drawn from `seed`.
    Train { seed: u64 },
    Eval,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Bn(BnStats),
    Mask(Vec<f64>),
    Map(SpatialMap),
}

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: Mode,
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    output: NodeId,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.values[self.output].as_ref().expect("output retained")
    }

    pub fn into_output(mut self) -> Tensor {
        self.values[self.output].take().expect("output retained")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    nodes: Vec<Node>,
    output: NodeId,
}

fn spatial_of(s: NodeShape) -> [usize; 3] {
    [s[1], s[2], s[3]]
}

fn pool_map(op: &Op, input: [usize; 3], like: Option<[usize; 3]>) -> SpatialMap {
    let axis = |a: usize| match op {
        Op::AvgPool { factor } => AxisMap::avg_pool(input[a], factor[a]),
        Op::AdaptiveAvgPool { bins } => {
            AxisMap::adaptive(input[a], if input[a] == 1 { 1 } else { *bins })
        }
        Op::Resize => AxisMap::linear(input[a], like.expect("resize target")[a]),
        _ => unreachable!("not a resampling op"),
    };
    SpatialMap {
        axes: [axis(0), axis(1), axis(2)],
    }
}

impl LayerGraph {
    pub(crate) fn new(nodes: Vec<Node>, output: NodeId) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            if n.inputs.iter().any(|&j| j >= i) {
                return Err(NnError::Graph(format!("node {} references a later node", n.name)));
            }
        }
        if !matches!(nodes.get(output).map(|n| &n.op), Some(Op::Softmax)) {
            return Err(NnError::Graph("output node must be a channel softmax".into()));
        }
        if !matches!(nodes.first().map(|n| &n.op), Some(Op::Input)) {
            return Err(NnError::Graph("first node must be the input".into()));
        }
        Ok(LayerGraph { nodes, output })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Distinct first path components of node names.
    pub fn top_scopes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.nodes {
            if let Some((head, _)) = n.name.split_once('/') {
                if !out.iter().any(|s| s == head) {
                    out.push(head.to_string());
                }
            }
        }
        out
    }

    /// Output shape of every node for one sample of shape `input`.
    pub fn infer_shapes(&self, params: &ParamStore, input: NodeShape) -> Result<Vec<NodeShape>> {
        let mut shapes: Vec<NodeShape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<NodeShape> = node.inputs.iter().map(|&i| shapes[i]).collect();
            let err = |m: String| NnError::Shape(format!("{}: {m}", node.name));
            let s = match &node.op {
                Op::Input => input,
                Op::Conv {
                    out_channels,
                    geom,
                    weight,
                    ..
                } => {
                    let expect = out_channels * ins[0][0] * geom.kernel_volume();
                    if params.param(*weight).len() != expect {
                        return Err(err(format!("expects {} input channels", params.param(*weight).len() / out_channels / geom.kernel_volume())));
                    }
                    let o = geom.conv_out(spatial_of(ins[0])).map_err(|e| err(e.to_string()))?;
                    [*out_channels, o[0], o[1], o[2]]
                }
                Op::ConvTranspose {
                    out_channels,
                    geom,
                    weight,
                    ..
                } => {
                    let expect = out_channels * ins[0][0] * geom.kernel_volume();
                    if params.param(*weight).len() != expect {
                        return Err(err("input channel mismatch".into()));
                    }
                    let o = geom.transpose_out(spatial_of(ins[0])).map_err(|e| err(e.to_string()))?;
                    [*out_channels, o[0], o[1], o[2]]
                }
                Op::BatchNorm { gamma, .. } => {
                    if params.param(*gamma).len() != ins[0][0] {
                        return Err(err("channel mismatch".into()));
                    }
                    ins[0]
                }
                Op::Dropout { .. } | Op::Relu | Op::Softmax => ins[0],
                Op::Add => {
                    if ins[0] != ins[1] {
                        return Err(err(format!("adding {:?} and {:?}", ins[0], ins[1])));
                    }
                    ins[0]
                }
                Op::Concat => {
                    let sp = spatial_of(ins[0]);
                    if ins.iter().any(|s| spatial_of(*s) != sp) {
                        return Err(err(format!("concatenating mismatched spatial shapes {ins:?}")));
                    }
                    let c = ins.iter().map(|s| s[0]).sum();
                    [c, sp[0], sp[1], sp[2]]
                }
                Op::AvgPool { .. } | Op::AdaptiveAvgPool { .. } => {
                    let o = pool_map(&node.op, spatial_of(ins[0]), None).out_dims();
                    [ins[0][0], o[0], o[1], o[2]]
                }
                Op::Resize => [ins[0][0], ins[1][1], ins[1][2], ins[1][3]],
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Last consumer of every node (the output counts as consumed at the end).
    fn last_use(&self) -> Vec<usize> {
        let mut last: Vec<usize> = (0..self.nodes.len()).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                last[j] = i;
            }
        }
        last[self.output] = usize::MAX;
        last
    }

    /// Run the graph. In evaluation mode intermediate values are released as
    /// soon as they are consumed; in training mode all are kept for
    /// [`LayerGraph::backward`].
    pub fn forward(&self, params: &ParamStore, x: Tensor, mode: Mode) -> Result<Tape> {
        let [n, c, d, h, w] = x.shape();
        if n == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        self.infer_shapes(params, [c, d, h, w])?;
        let keep = matches!(mode, Mode::Train { .. });
        let last = self.last_use();
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut aux: Vec<Aux> = vec![Aux::None; self.nodes.len()];
        let mut input = Some(x);
        for (i, node) in self.nodes.iter().enumerate() {
            let arg = |k: usize| values[node.inputs[k]].as_ref().expect("input value retained");
            let out = match &node.op {
                Op::Input => input.take().expect("single input node"),
                Op::Conv {
                    out_channels,
                    geom,
                    weight,
                    bias,
                } => conv_forward(arg(0), params.param(*weight), bias.map(|b| params.param(b)), *out_channels, geom)?,
                Op::ConvTranspose {
                    out_channels,
                    geom,
                    weight,
                    bias,
                } => conv_transpose_forward(arg(0), params.param(*weight), bias.map(|b| params.param(b)), *out_channels, geom)?,
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    ..
                } => match mode {
                    Mode::Train { .. } => {
                        let st = ops::batch_stats(arg(0), *eps);
                        let y = ops::bn_apply(arg(0), &st.mean, &st.inv_std, params.param(*gamma), params.param(*beta));
                        aux[i] = Aux::Bn(st);
                        y
                    }
                    Mode::Eval => {
                        let inv: Vec<f64> = params.buffer(*running_var).iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                        ops::bn_apply(arg(0), params.buffer(*running_mean), &inv, params.param(*gamma), params.param(*beta))
                    }
                },
                Op::Dropout { rate } => match mode {
                    Mode::Train { seed } if *rate > 0.0 => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(i as u64);
                        let keep_p = 1.0 - rate;
                        let mask: Vec<f64> = (0..arg(0).len())
                            .map(|_| if rng.random::<f64>() < keep_p { 1.0 / keep_p } else { 0.0 })
                            .collect();
                        let mut y = arg(0).clone();
                        y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                        aux[i] = Aux::Mask(mask);
                        y
                    }
                    _ => arg(0).clone(),
                },
                Op::Relu => ops::relu(arg(0)),
                Op::Add => {
                    let mut y = arg(0).clone();
                    y.add_assign(arg(1));
                    y
                }
                Op::Concat => concat(node.inputs.iter().map(|&j| values[j].as_ref().expect("retained"))),
                Op::AvgPool { .. } | Op::AdaptiveAvgPool { .. } | Op::Resize => {
                    let like = node.inputs.get(1).map(|&j| values[j].as_ref().expect("retained").spatial());
                    let map = pool_map(&node.op, arg(0).spatial(), like);
                    let y = map.forward(arg(0));
                    if keep {
                        aux[i] = Aux::Map(map);
                    }
                    y
                }
                Op::Softmax => ops::softmax(arg(0)),
            };
            values[i] = Some(out);
            if !keep {
                for &j in &node.inputs {
                    if last[j] == i {
                        values[j] = None;
                    }
                }
            }
        }
        Ok(Tape {
            mode,
            values,
            aux,
            output: self.output,
        })
    }

    /// Gradients of `<grad_out, output>` with respect to every parameter.
    pub fn backward(&self, params: &ParamStore, tape: &Tape, grad_out: Tensor) -> Result<Grads> {
        if !matches!(tape.mode, Mode::Train { .. }) {
            return Err(NnError::Graph("backward needs a training-mode tape".into()));
        }
        if grad_out.shape() != tape.output().shape() {
            return Err(NnError::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.shape(),
                tape.output().shape()
            )));
        }
        let value = |j: NodeId| tape.values[j].as_ref().expect("training tape keeps all values");
        let mut grads = params.zeros_like();
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        node_grads[self.output] = Some(grad_out);
        let push = |ng: &mut Vec<Option<Tensor>>, j: NodeId, g: Tensor| match &mut ng[j] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            let x0 = || value(node.inputs[0]);
            match &node.op {
                Op::Input => {}
                Op::Conv { geom, weight, bias, .. } => {
                    let (gw, gb) = split_two(&mut grads, *weight, *bias);
                    let gx = conv_backward(x0(), params.param(*weight), &gy, geom, gw, gb);
                    push(&mut node_grads, node.inputs[0], gx);
                }
                Op::ConvTranspose { geom, weight, bias, .. } => {
                    let (gw, gb) = split_two(&mut grads, *weight, *bias);
                    let gx = conv_transpose_backward(x0(), params.param(*weight), &gy, geom, gw, gb);
                    push(&mut node_grads, node.inputs[0], gx);
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    ..
                } => {
                    let (gg, gb) = split_two(&mut grads, *gamma, Some(*beta));
                    let gb = gb.expect("beta present");
                    let gx = match &tape.aux[i] {
                        Aux::Bn(st) => ops::bn_backward_train(x0(), &gy, st, params.param(*gamma), gg, gb),
                        _ => {
                            let inv: Vec<f64> = params.buffer(*running_var).iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                            ops::bn_backward_eval(x0(), &gy, params.buffer(*running_mean), &inv, params.param(*gamma), gg, gb)
                        }
                    };
                    push(&mut node_grads, node.inputs[0], gx);
                }
                Op::Dropout { .. } => {
                    let mut gx = gy;
                    if let Aux::Mask(mask) = &tape.aux[i] {
                        gx.data_mut().iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                    }
                    push(&mut node_grads, node.inputs[0], gx);
                }
                Op::Relu => {
                    let gx = ops::relu_backward(value(i), &gy);
                    push(&mut node_grads, node.inputs[0], gx);
                }
                Op::Add => {
                    push(&mut node_grads, node.inputs[1], gy.clone());
                    push(&mut node_grads, node.inputs[0], gy);
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &j in &node.inputs {
                        let cj = value(j).channels();
                        let part = slice_channels(&gy, offset, cj);
                        offset += cj;
                        push(&mut node_grads, j, part);
                    }
                }
                Op::AvgPool { .. } | Op::AdaptiveAvgPool { .. } | Op::Resize => {
                    let Aux::Map(map) = &tape.aux[i] else {
                        unreachable!("training tape records resampling maps")
                    };
                    push(&mut node_grads, node.inputs[0], map.backward(&gy));
                }
                Op::Softmax => {
                    let gx = ops::softmax_backward(value(i), &gy);
                    push(&mut node_grads, node.inputs[0], gx);
                }
            }
        }
        Ok(grads)
    }

    /// Fold the batch statistics of a training tape into running estimates.
    pub fn update_running_stats(&self, params: &mut ParamStore, tape: &Tape) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (
                Op::BatchNorm {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                },
                Aux::Bn(st),
            ) = (&node.op, &tape.aux[i])
            {
                for (r, m) in params.buffer_mut(*running_mean).iter_mut().zip(&st.mean) {
                    *r = (1.0 - momentum) * *r + momentum * m;
                }
                for (r, v) in params.buffer_mut(*running_var).iter_mut().zip(&st.var_unbiased) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
    }
}

fn split_two(grads: &mut Grads, a: ParamId, b: Option<ParamId>) -> (&mut [f64], Option<&mut [f64]>) {
    match b {
        None => (&mut grads.0[a], None),
        Some(b) => {
            debug_assert_ne!(a, b);
            if a < b {
                let (lo, hi) = grads.0.split_at_mut(b);
                (&mut lo[a], Some(&mut hi[0]))
            } else {
                let (lo, hi) = grads.0.split_at_mut(a);
                (&mut hi[0], Some(&mut lo[b]))
            }
        }
    }
}

fn concat<'a>(parts: impl Iterator<Item = &'a Tensor> + Clone) -> Tensor {
    let first = parts.clone().next().expect("concat has inputs");
    let [n, _, d, h, w] = first.shape();
    let c: usize = parts.clone().map(Tensor::channels).sum();
    let mut out = Tensor::zeros([n, c, d, h, w]);
    for b in 0..n {
        let dst = out.item_mut(b);
        let mut o = 0;
        for t in parts.clone() {
            let src = t.item(b);
            dst[o..o + src.len()].copy_from_slice(src);
            o += src.len();
        }
    }
    out
}

fn slice_channels(t: &Tensor, start: usize, len: usize) -> Tensor {
    let [n, _, d, h, w] = t.shape();
    let v = t.voxels();
    let mut out = Tensor::zeros([n, len, d, h, w]);
    for b in 0..n {
        let src = &t.item(b)[start * v..(start + len) * v];
        out.item_mut(b).copy_from_slice(src);
    }
    out
}
