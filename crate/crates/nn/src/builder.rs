use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::ConvGeom;
use crate::error::Result;
use crate::graph::{LayerGraph, Node, NodeId, Op};
use crate::params::ParamStore;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const HE_GAIN: f64 = 2.0;
const CLASSIFIER_GAIN: f64 = 0.01;

/// Appends nodes under a scope path while creating and initialising their
/// parameters.
pub(crate) struct GraphBuilder {
    nodes: Vec<Node>,
    channels: Vec<usize>,
    params: ParamStore,
    scope: Vec<String>,
    counter: usize,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
            }],
            channels: vec![in_channels],
            params: ParamStore::default(),
            scope: vec![],
            counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn channels(&self, x: NodeId) -> usize {
        self.channels[x]
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn name(&mut self, label: &str) -> String {
        self.counter += 1;
        let mut parts = self.scope.clone();
        parts.push(format!("{label}{}", self.counter));
        parts.join("/")
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node { name, op, inputs });
        self.channels.push(channels);
        self.nodes.len() - 1
    }

    /// Normal weights with variance `gain / fan_in`.
    fn init(&mut self, gain: f64, fan_in: f64, len: usize) -> Vec<f64> {
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
        (0..len).map(|_| normal.sample(&mut self.rng)).collect()
    }

    pub fn conv(&mut self, x: NodeId, out: usize, geom: ConvGeom, bias: bool) -> NodeId {
        self.conv_with_gain(x, out, geom, bias, HE_GAIN)
    }

    /// Final per-voxel classifier; small weights keep initial outputs near
    /// uniform.
    pub fn classifier(&mut self, x: NodeId, classes: usize, geom: ConvGeom) -> NodeId {
        self.conv_with_gain(x, classes, geom, true, CLASSIFIER_GAIN)
    }

    fn conv_with_gain(&mut self, x: NodeId, out: usize, geom: ConvGeom, bias: bool, gain: f64) -> NodeId {
        let cin = self.channels[x];
        let k = geom.kernel;
        let name = self.name("conv");
        let w = self.init(gain, (cin * geom.kernel_volume()) as f64, out * cin * geom.kernel_volume());
        let weight = self.params.add_param(format!("{name}.weight"), vec![out, cin, k[0], k[1], k[2]], w);
        let bias = bias.then(|| self.params.add_param(format!("{name}.bias"), vec![out], vec![0.0; out]));
        self.push(
            name,
            Op::Conv {
                out_channels: out,
                geom,
                weight,
                bias,
            },
            vec![x],
            out,
        )
    }

    pub fn conv_transpose(&mut self, x: NodeId, out: usize, geom: ConvGeom, bias: bool) -> NodeId {
        let cin = self.channels[x];
        let k = geom.kernel;
        let name = self.name("deconv");
        // each output voxel sees cin · K / stride³ weights
        let fan_in = (cin * geom.kernel_volume()) as f64 / geom.stride.iter().product::<usize>() as f64;
        let w = self.init(HE_GAIN, fan_in.max(1.0), out * cin * geom.kernel_volume());
        let weight = self.params.add_param(format!("{name}.weight"), vec![cin, out, k[0], k[1], k[2]], w);
        let bias = bias.then(|| self.params.add_param(format!("{name}.bias"), vec![out], vec![0.0; out]));
        self.push(
            name,
            Op::ConvTranspose {
                out_channels: out,
                geom,
                weight,
                bias,
            },
            vec![x],
            out,
        )
    }

    pub fn batch_norm(&mut self, x: NodeId) -> NodeId {
        let c = self.channels[x];
        let name = self.name("bn");
        let gamma = self.params.add_param(format!("{name}.gamma"), vec![c], vec![1.0; c]);
        let beta = self.params.add_param(format!("{name}.beta"), vec![c], vec![0.0; c]);
        let running_mean = self.params.add_buffer(format!("{name}.running_mean"), vec![c], vec![0.0; c]);
        let running_var = self.params.add_buffer(format!("{name}.running_var"), vec![c], vec![1.0; c]);
        self.push(
            name,
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
            vec![x],
            c,
        )
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        let name = self.name("dropout");
        let c = self.channels[x];
        self.push(name, Op::Dropout { rate }, vec![x], c)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let name = self.name("relu");
        let c = self.channels[x];
        self.push(name, Op::Relu, vec![x], c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let name = self.name("add");
        let c = self.channels[a];
        self.push(name, Op::Add, vec![a, b], c)
    }

    pub fn concat(&mut self, label: &str, parts: &[NodeId]) -> NodeId {
        let name = self.name(label);
        let c = parts.iter().map(|&p| self.channels[p]).sum();
        self.push(name, Op::Concat, parts.to_vec(), c)
    }

    pub fn avg_pool(&mut self, x: NodeId, factor: [usize; 3]) -> NodeId {
        let name = self.name("avgpool");
        let c = self.channels[x];
        self.push(name, Op::AvgPool { factor }, vec![x], c)
    }

    pub fn adaptive_pool(&mut self, x: NodeId, bins: usize) -> NodeId {
        let name = self.name(&format!("pool{bins}x"));
        let c = self.channels[x];
        self.push(name, Op::AdaptiveAvgPool { bins }, vec![x], c)
    }

    pub fn resize(&mut self, x: NodeId, like: NodeId) -> NodeId {
        let name = self.name("resize");
        let c = self.channels[x];
        self.push(name, Op::Resize, vec![x, like], c)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let name = self.name("softmax");
        let c = self.channels[x];
        self.push(name, Op::Softmax, vec![x], c)
    }

    pub fn finish(self, output: NodeId) -> Result<(LayerGraph, ParamStore)> {
        Ok((LayerGraph::new(self.nodes, output)?, self.params))
    }
}
