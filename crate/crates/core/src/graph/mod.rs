//! The network as a small DAG of named nodes.
//!
//! A node's output may be read by several consumers (for the pooling network,
//! `pool2` feeds both `conv3` and `ssp-1`, and `pool3` feeds `conv4` and
//! `ssp-2`). The backward pass sums the gradients arriving from every
//! consumer before propagating further.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION_MSPN, VERSION_PATCH};
pub use config::{
    min_input_width, stage_extents, stage_heights, MspnConfig, PatchNetConfig, SspStage, Variant, VariantOptions,
    CONV_CHAIN, DEFAULT_CHANNELS, DEFAULT_CLASSES, DEFAULT_FC, DEFAULT_INPUT_HEIGHT, PATCH_SIZE,
};

use crate::error::{Error, Result};
use crate::layers::{
    maxpool_backward_into, maxpool_forward, relu_backward, relu_forward, softmax_xent_backward, softmax_xent_forward,
    ConvLayer, FullyConnectedLayer, MaxPoolSaved, SspLayer,
};
use crate::params::Gradients;
use crate::scalar::Scalar;
use crate::tensor::{concat, row_reduce_backward, FeatureMapStack, FlatVector, PoolMode, RowReduceSaved};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    /// Index into the graph's conv layers.
    Conv(usize),
    Relu,
    MaxPool,
    Ssp(PoolMode),
    Flatten,
    Concat,
    /// Index into the graph's fully connected layers.
    Fc(usize),
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl NodeSpec {
    fn new(name: &str, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    Mspn(MspnConfig),
    Patch(PatchNetConfig),
}

impl Architecture {
    fn channels(&self) -> [usize; 4] {
        match self {
            Architecture::Mspn(c) => c.channels,
            Architecture::Patch(c) => c.channels,
        }
    }

    fn fc_widths(&self) -> [usize; 2] {
        match self {
            Architecture::Mspn(c) => c.fc_widths,
            Architecture::Patch(c) => c.fc_widths,
        }
    }

    fn in_channels(&self) -> usize {
        match self {
            Architecture::Mspn(c) => c.in_channels,
            Architecture::Patch(c) => c.in_channels,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Architecture::Mspn(c) => c.n_classes,
            Architecture::Patch(c) => c.n_classes,
        }
    }

    pub fn input_height(&self) -> usize {
        match self {
            Architecture::Mspn(c) => c.input_height,
            Architecture::Patch(c) => c.patch_size,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mspn(c) => c.validate(),
            Architecture::Patch(c) => c.validate(),
        }
    }

    fn head_dim(&self) -> usize {
        match self {
            Architecture::Mspn(c) => c.concat_dim(),
            Architecture::Patch(c) => c.flatten_dim(),
        }
    }
}

/// Conv trunk shared by both architectures, then the pooling head, then the
/// fc stack. Node order is topological.
fn topology(arch: &Architecture) -> Vec<NodeSpec> {
    use LayerKind::*;
    let mut nodes = vec![
        NodeSpec::new("input", Input, &[]),
        NodeSpec::new("conv1", Conv(0), &["input"]),
        NodeSpec::new("relu1", Relu, &["conv1"]),
        NodeSpec::new("pool1", MaxPool, &["relu1"]),
        NodeSpec::new("conv2", Conv(1), &["pool1"]),
        NodeSpec::new("relu2", Relu, &["conv2"]),
        NodeSpec::new("pool2", MaxPool, &["relu2"]),
        NodeSpec::new("conv3", Conv(2), &["pool2"]),
        NodeSpec::new("relu3", Relu, &["conv3"]),
        NodeSpec::new("pool3", MaxPool, &["relu3"]),
        NodeSpec::new("conv4", Conv(3), &["pool3"]),
        NodeSpec::new("relu4", Relu, &["conv4"]),
    ];
    let head = match arch {
        Architecture::Mspn(cfg) => {
            let stages = cfg.stages();
            for s in &stages {
                nodes.push(NodeSpec::new(s.name(), Ssp(cfg.ssp_mode), &[s.tap()]));
            }
            let names: Vec<&str> = stages.iter().map(|s| s.name()).collect();
            nodes.push(NodeSpec::new("concat", Concat, &names));
            "concat"
        }
        Architecture::Patch(_) => {
            nodes.push(NodeSpec::new("flatten", Flatten, &["relu4"]));
            "flatten"
        }
    };
    nodes.extend([
        NodeSpec::new("fc1", Fc(0), &[head]),
        NodeSpec::new("fc1-relu", Relu, &["fc1"]),
        NodeSpec::new("fc2", Fc(1), &["fc1-relu"]),
        NodeSpec::new("fc2-relu", Relu, &["fc2"]),
        NodeSpec::new("fc-out", Fc(2), &["fc2-relu"]),
        NodeSpec::new("out", Softmax, &["fc-out"]),
    ]);
    nodes
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    kind: LayerKind,
    inputs: Vec<usize>,
}

/// Resolves names to indices and checks the DAG invariants: unique names,
/// inputs defined before use (hence acyclic), exactly one `out`.
fn resolve(specs: &[NodeSpec]) -> Result<Vec<Node>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut nodes = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let inputs = spec
            .inputs
            .iter()
            .map(|n| {
                index
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::config(format!("node {:?} reads undefined or later node {n:?}", spec.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        if (spec.kind == LayerKind::Input) != inputs.is_empty() {
            return Err(Error::config(format!("node {:?} has an invalid input list", spec.name)));
        }
        if index.insert(spec.name.as_str(), i).is_some() {
            return Err(Error::config(format!("duplicate node name {:?}", spec.name)));
        }
        nodes.push(Node { kind: spec.kind, inputs });
    }
    let outs = specs.iter().filter(|s| s.name == "out").count();
    if outs != 1 {
        return Err(Error::config(format!("graph must have exactly one \"out\" node, found {outs}")));
    }
    Ok(nodes)
}

/// Output of one node during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Value<T> {
    Maps(FeatureMapStack<T>),
    Flat(FlatVector<T>),
}

impl<T: Scalar> Value<T> {
    pub fn as_maps(&self) -> Option<&FeatureMapStack<T>> {
        match self {
            Value::Maps(m) => Some(m),
            Value::Flat(_) => None,
        }
    }

    pub fn as_flat(&self) -> Option<&FlatVector<T>> {
        match self {
            Value::Flat(v) => Some(v),
            Value::Maps(_) => None,
        }
    }

    fn data(&self) -> &[T] {
        match self {
            Value::Maps(m) => m.data(),
            Value::Flat(v) => v.data(),
        }
    }

    fn data_mut(&mut self) -> &mut [T] {
        match self {
            Value::Maps(m) => m.data_mut(),
            Value::Flat(v) => v.data_mut(),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Value::Maps(m) => Value::Maps(m.zeros_like()),
            Value::Flat(v) => Value::Flat(FlatVector::zeros(v.len())),
        }
    }
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    MaxPool(MaxPoolSaved),
    Ssp(RowReduceSaved),
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    values: Vec<Value<T>>,
    saved: Vec<Saved>,
    names: Vec<String>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Softmax probabilities.
    pub fn probs(&self) -> &[T] {
        self.values.last().map(Value::data).unwrap_or(&[])
    }

    pub fn logits(&self) -> &[T] {
        self.values[self.values.len() - 2].data()
    }

    pub fn value(&self, name: &str) -> Option<&Value<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn predicted_class(&self) -> usize {
        crate::tensor::argmax(self.probs()).unwrap_or(0)
    }

    /// Negative log-likelihood of `label`.
    pub fn loss(&self, label: usize) -> Result<T> {
        Ok(softmax_xent_forward(self.logits(), label)?.1)
    }
}

/// A network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph<T> {
    arch: Architecture,
    specs: Vec<NodeSpec>,
    nodes: Vec<Node>,
    pub(crate) convs: Vec<ConvLayer<T>>,
    pub(crate) fcs: Vec<FullyConnectedLayer<T>>,
    class_names: Vec<String>,
    min_width: usize,
}

impl<T: Scalar> NetworkGraph<T> {
    /// Builds the pooling network with Glorot-initialised weights.
    pub fn mspn(cfg: MspnConfig, seed: u64) -> Result<Self> {
        Self::build(Architecture::Mspn(cfg), Some(seed))
    }

    /// Builds the fixed-size patch classifier with Glorot-initialised weights.
    pub fn patch_net(cfg: PatchNetConfig, seed: u64) -> Result<Self> {
        Self::build(Architecture::Patch(cfg), Some(seed))
    }

    /// Builds one ablation row on top of `base`.
    pub fn variant(variant: Variant, base: &MspnConfig, opts: &VariantOptions, seed: u64) -> Result<Self> {
        Self::mspn(variant.config(base, opts), seed)
    }

    /// Same layout as [`NetworkGraph::build`] but with every parameter zero.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        Self::build(arch, None)
    }

    pub fn build(arch: Architecture, seed: Option<u64>) -> Result<Self> {
        arch.validate()?;
        let specs = topology(&arch);
        let nodes = resolve(&specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let channels = arch.channels();
        let mut convs = Vec::with_capacity(4);
        let mut in_maps = arch.in_channels();
        for (&out_maps, &(k, pad)) in channels.iter().zip(&CONV_CHAIN) {
            let layer = match seed {
                Some(_) => ConvLayer::init(&mut rng, in_maps, out_maps, (k, k), (pad, pad))?,
                None => ConvLayer::zeros(in_maps, out_maps, (k, k), (pad, pad))?,
            };
            convs.push(layer);
            in_maps = out_maps;
        }
        let fc = arch.fc_widths();
        let dims = [arch.head_dim(), fc[0], fc[1], arch.n_classes()];
        let mut fcs = Vec::with_capacity(3);
        for pair in dims.windows(2) {
            let layer = match seed {
                Some(_) => FullyConnectedLayer::init(&mut rng, pair[0], pair[1])?,
                None => FullyConnectedLayer::zeros(pair[0], pair[1])?,
            };
            fcs.push(layer);
        }
        let min_width = match &arch {
            Architecture::Mspn(_) => min_input_width(),
            Architecture::Patch(c) => c.patch_size,
        };
        let class_names = (0..arch.n_classes()).map(|i| format!("class-{i}")).collect();
        Ok(Self {
            arch,
            specs,
            nodes,
            convs,
            fcs,
            class_names,
            min_width,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn mspn_config(&self) -> Option<&MspnConfig> {
        match &self.arch {
            Architecture::Mspn(c) => Some(c),
            Architecture::Patch(_) => None,
        }
    }

    pub fn node_specs(&self) -> &[NodeSpec] {
        &self.specs
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.arch.n_classes() {
            return Err(Error::config(format!(
                "{} class names for a {}-class network",
                names.len(),
                self.arch.n_classes()
            )));
        }
        self.class_names = names;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    /// Smallest input width the graph accepts.
    pub fn min_width(&self) -> usize {
        self.min_width
    }

    pub fn conv_layers(&self) -> &[ConvLayer<T>] {
        &self.convs
    }

    pub fn fc_layers(&self) -> &[FullyConnectedLayer<T>] {
        &self.fcs
    }

    /// Parameter tensors in checkpoint order: conv1..conv4 then fc1, fc2,
    /// fc-out, each as weights followed by bias.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * (self.convs.len() + self.fcs.len()));
        for c in &self.convs {
            out.push(c.weights.as_slice());
            out.push(c.bias.as_slice());
        }
        for f in &self.fcs {
            out.push(f.weights.as_slice());
            out.push(f.bias.as_slice());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * (self.convs.len() + self.fcs.len()));
        for c in &mut self.convs {
            out.push(c.weights.as_mut_slice());
            out.push(c.bias.as_mut_slice());
        }
        for f in &mut self.fcs {
            out.push(f.weights.as_mut_slice());
            out.push(f.bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients::zeros_like(&self.params())
    }

    /// Same architecture and parameters at another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkGraph<U> {
        let conv = |c: &ConvLayer<T>| ConvLayer {
            in_maps: c.in_maps,
            out_maps: c.out_maps,
            k_h: c.k_h,
            k_w: c.k_w,
            pad_h: c.pad_h,
            pad_w: c.pad_w,
            weights: c.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: c.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        let fc = |f: &FullyConnectedLayer<T>| FullyConnectedLayer {
            in_dim: f.in_dim,
            out_dim: f.out_dim,
            weights: f.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: f.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        NetworkGraph {
            arch: self.arch.clone(),
            specs: self.specs.clone(),
            nodes: self.nodes.clone(),
            convs: self.convs.iter().map(conv).collect(),
            fcs: self.fcs.iter().map(fc).collect(),
            class_names: self.class_names.clone(),
            min_width: self.min_width,
        }
    }

    fn check_image(&self, image: &FeatureMapStack<T>) -> Result<()> {
        let (n, h, w) = image.shape();
        if n != self.arch.in_channels() {
            return Err(Error::contract(format!(
                "network expects {} input channel(s), got {n}",
                self.arch.in_channels()
            )));
        }
        if h != self.arch.input_height() {
            return Err(Error::contract(format!(
                "network expects input height {}, got {h}",
                self.arch.input_height()
            )));
        }
        match &self.arch {
            Architecture::Mspn(_) if w < self.min_width => Err(Error::MinWidth {
                min_width: self.min_width,
                got: w,
            }),
            Architecture::Patch(c) if w != c.patch_size => Err(Error::contract(format!(
                "patch network expects {0}x{0} input, got width {w}",
                c.patch_size
            ))),
            _ => Ok(()),
        }
    }

    pub fn forward(&self, image: &FeatureMapStack<T>) -> Result<ForwardPass<T>> {
        self.check_image(image)?;
        let mut values: Vec<Value<T>> = Vec::with_capacity(self.nodes.len());
        let mut saved = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let input = |k: usize| &values[node.inputs[k]];
            let maps_in = |k: usize| {
                input(k)
                    .as_maps()
                    .ok_or_else(|| Error::contract("layer expected feature maps"))
            };
            let (value, save) = match node.kind {
                LayerKind::Input => (Value::Maps(image.clone()), Saved::None),
                LayerKind::Conv(i) => (Value::Maps(self.convs[i].forward(maps_in(0)?)?), Saved::None),
                LayerKind::Relu => {
                    let v = match input(0) {
                        Value::Maps(m) => {
                            let (n, h, w) = m.shape();
                            Value::Maps(FeatureMapStack::from_vec(n, h, w, relu_forward(m.data()))?)
                        }
                        Value::Flat(v) => Value::Flat(FlatVector::new(relu_forward(v.data()))),
                    };
                    (v, Saved::None)
                }
                LayerKind::MaxPool => {
                    let (out, s) = maxpool_forward(maps_in(0)?)?;
                    (Value::Maps(out), Saved::MaxPool(s))
                }
                LayerKind::Ssp(mode) => {
                    let (out, s) = SspLayer::new(mode).forward(maps_in(0)?);
                    (Value::Flat(out), Saved::Ssp(s))
                }
                LayerKind::Flatten => (Value::Flat(FlatVector::new(maps_in(0)?.data().to_vec())), Saved::None),
                LayerKind::Concat => {
                    let parts = node
                        .inputs
                        .iter()
                        .map(|&i| values[i].as_flat().ok_or_else(|| Error::contract("concat expects vectors")))
                        .collect::<Result<Vec<_>>>()?;
                    (Value::Flat(concat(&parts)?), Saved::None)
                }
                LayerKind::Fc(i) => {
                    let x = input(0)
                        .as_flat()
                        .ok_or_else(|| Error::contract("fully connected layer expects a vector"))?;
                    (Value::Flat(self.fcs[i].forward(x)?), Saved::None)
                }
                LayerKind::Softmax => (
                    Value::Flat(FlatVector::new(crate::layers::softmax(input(0).data()))),
                    Saved::None,
                ),
            };
            values.push(value);
            saved.push(save);
        }
        Ok(ForwardPass {
            values,
            saved,
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
        })
    }

    /// Class probabilities for one image.
    pub fn predict(&self, image: &FeatureMapStack<T>) -> Result<Vec<T>> {
        Ok(self.forward(image)?.probs().to_vec())
    }

    /// Backpropagates `dloss * d(-log p[label])` and accumulates every
    /// parameter gradient into `grads`.
    pub fn backward(&self, pass: &ForwardPass<T>, label: usize, dloss: T, grads: &mut Gradients<T>) -> Result<()> {
        self.backward_masked(pass, label, dloss, grads, &[])
    }

    /// Like [`NetworkGraph::backward`] but drops the gradient along each
    /// `(consumer, producer)` edge listed in `blocked`.
    pub fn backward_masked(
        &self,
        pass: &ForwardPass<T>,
        label: usize,
        dloss: T,
        grads: &mut Gradients<T>,
        blocked: &[(&str, &str)],
    ) -> Result<()> {
        if pass.values.len() != self.nodes.len() || pass.names.iter().zip(&self.specs).any(|(a, b)| *a != b.name) {
            return Err(Error::contract("backward called with a forward pass from a different graph"));
        }
        let n_tensors = 2 * (self.convs.len() + self.fcs.len());
        if grads.tensors.len() != n_tensors {
            return Err(Error::contract("gradient bundle does not match this graph"));
        }
        let is_blocked = |consumer: usize, producer: usize| {
            blocked
                .iter()
                .any(|&(c, p)| self.specs[consumer].name == c && self.specs[producer].name == p)
        };

        let mut node_grads: Vec<Option<Value<T>>> = vec![None; self.nodes.len()];
        let out = self.nodes.len() - 1;
        let logits_node = self.nodes[out].inputs[0];
        let g_logits = softmax_xent_backward(pass.probs(), label, dloss)?;
        node_grads[logits_node] = Some(Value::Flat(FlatVector::new(g_logits)));

        let n_conv = self.convs.len();
        for idx in (0..out).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            // per-input gradient buffers, allocated lazily
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&p| self.nodes[p].kind != LayerKind::Input && !is_blocked(idx, p))
                .collect();
            let take_buf = |p: usize, node_grads: &mut Vec<Option<Value<T>>>| {
                node_grads[p].take().unwrap_or_else(|| pass.values[p].zeros_like())
            };
            match node.kind {
                LayerKind::Input | LayerKind::Softmax => {}
                LayerKind::Conv(i) => {
                    let p = node.inputs[0];
                    let x = pass.values[p].as_maps().ok_or_else(|| Error::contract("conv input"))?;
                    let go = g.as_maps().ok_or_else(|| Error::contract("conv grad"))?;
                    let (gw, rest) = grads.tensors[2 * i..].split_at_mut(1);
                    let mut buf = wants[0].then(|| take_buf(p, &mut node_grads));
                    let gi = match buf.as_mut() {
                        Some(Value::Maps(m)) => Some(m),
                        _ => None,
                    };
                    self.convs[i].backward_into(x, go, gi, &mut gw[0], &mut rest[0])?;
                    if buf.is_some() {
                        node_grads[p] = buf;
                    }
                }
                LayerKind::Fc(i) => {
                    let p = node.inputs[0];
                    let x = pass.values[p].as_flat().ok_or_else(|| Error::contract("fc input"))?;
                    let go = g.as_flat().ok_or_else(|| Error::contract("fc grad"))?;
                    let t = 2 * (n_conv + i);
                    let (gw, rest) = grads.tensors[t..].split_at_mut(1);
                    let mut buf = wants[0].then(|| take_buf(p, &mut node_grads));
                    let gi = match buf.as_mut() {
                        Some(Value::Flat(v)) => Some(v),
                        _ => None,
                    };
                    self.fcs[i].backward_into(x, go, gi, &mut gw[0], &mut rest[0])?;
                    if buf.is_some() {
                        node_grads[p] = buf;
                    }
                }
                LayerKind::Relu => {
                    let p = node.inputs[0];
                    if wants[0] {
                        let mut buf = take_buf(p, &mut node_grads);
                        relu_backward(pass.values[p].data(), g.data(), buf.data_mut())?;
                        node_grads[p] = Some(buf);
                    }
                }
                LayerKind::MaxPool => {
                    let p = node.inputs[0];
                    if wants[0] {
                        let Saved::MaxPool(s) = &pass.saved[idx] else {
                            return Err(Error::contract("missing max pool state"));
                        };
                        let mut buf = take_buf(p, &mut node_grads);
                        let (Value::Maps(gi), Value::Maps(go)) = (&mut buf, &g) else {
                            return Err(Error::contract("max pool gradient kinds"));
                        };
                        maxpool_backward_into(go, s, gi)?;
                        node_grads[p] = Some(buf);
                    }
                }
                LayerKind::Ssp(_) => {
                    let p = node.inputs[0];
                    if wants[0] {
                        let Saved::Ssp(s) = &pass.saved[idx] else {
                            return Err(Error::contract("missing ssp state"));
                        };
                        let go = g.as_flat().ok_or_else(|| Error::contract("ssp grad"))?;
                        let local = row_reduce_backward(go, s)?;
                        let mut buf = take_buf(p, &mut node_grads);
                        buf.data_mut().iter_mut().zip(local.data()).for_each(|(a, &b)| *a += b);
                        node_grads[p] = Some(buf);
                    }
                }
                LayerKind::Flatten => {
                    let p = node.inputs[0];
                    if wants[0] {
                        let mut buf = take_buf(p, &mut node_grads);
                        buf.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
                        node_grads[p] = Some(buf);
                    }
                }
                LayerKind::Concat => {
                    let mut offset = 0;
                    for (k, &p) in node.inputs.iter().enumerate() {
                        let len = pass.values[p].data().len();
                        if wants[k] {
                            let mut buf = take_buf(p, &mut node_grads);
                            buf.data_mut()
                                .iter_mut()
                                .zip(&g.data()[offset..offset + len])
                                .for_each(|(a, &b)| *a += b);
                            node_grads[p] = Some(buf);
                        }
                        offset += len;
                    }
                }
            }
        }
        Ok(())
    }

    /// Forward, loss and accumulated gradients for one labelled image.
    pub fn loss_and_grads_into(&self, image: &FeatureMapStack<T>, label: usize, grads: &mut Gradients<T>) -> Result<T> {
        let pass = self.forward(image)?;
        let loss = pass.loss(label)?;
        self.backward(&pass, label, T::one(), grads)?;
        Ok(loss)
    }

    pub fn loss_and_grads(&self, image: &FeatureMapStack<T>, label: usize) -> Result<(T, Gradients<T>)> {
        let mut grads = self.zero_grads();
        let loss = self.loss_and_grads_into(image, label, &mut grads)?;
        Ok((loss, grads))
    }

    /// `(n_map, h, w)` of pool1, pool2, pool3 and conv4 for an input width.
    pub fn stage_shapes(&self, width: usize) -> Result<[(usize, usize, usize); 4]> {
        let heights = stage_extents(self.arch.input_height())
            .ok_or_else(|| Error::config("input height incompatible with conv chain"))?;
        let widths = stage_extents(width).ok_or(Error::MinWidth {
            min_width: self.min_width,
            got: width,
        })?;
        let c = self.arch.channels();
        Ok([0, 1, 2, 3].map(|i| (c[i], heights[i], widths[i])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MspnConfig {
        MspnConfig {
            channels: [3, 4, 5, 6],
            fc_widths: [8, 7],
            ..MspnConfig::default()
        }
    }

    fn image(w: usize, seed: u64) -> FeatureMapStack<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMapStack::from_vec(1, 32, w, (0..32 * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn topology_is_a_valid_dag() {
        let g = NetworkGraph::<f32>::mspn(tiny(), 0).unwrap();
        let names: Vec<_> = g.node_specs().iter().map(|s| s.name.as_str()).collect();
        assert!(names.contains(&"ssp-1") && names.contains(&"ssp-3"));
        assert_eq!(names.last(), Some(&"out"));
        let concat = g.node_specs().iter().find(|s| s.name == "concat").unwrap();
        assert_eq!(concat.inputs, vec!["ssp-1", "ssp-2", "ssp-3"]);
    }

    #[test]
    fn resolve_rejects_cycles_and_duplicates() {
        let bad = vec![
            NodeSpec::new("input", LayerKind::Input, &[]),
            NodeSpec::new("a", LayerKind::Relu, &["b"]),
            NodeSpec::new("b", LayerKind::Relu, &["a"]),
            NodeSpec::new("out", LayerKind::Softmax, &["b"]),
        ];
        assert!(resolve(&bad).is_err());
        let dup = vec![
            NodeSpec::new("input", LayerKind::Input, &[]),
            NodeSpec::new("out", LayerKind::Relu, &["input"]),
            NodeSpec::new("out", LayerKind::Softmax, &["out"]),
        ];
        assert!(resolve(&dup).is_err());
        let no_out = vec![NodeSpec::new("input", LayerKind::Input, &[])];
        assert!(resolve(&no_out).is_err());
    }

    #[test]
    fn zero_input_gives_uniform_probs() {
        let g = NetworkGraph::<f64>::mspn(tiny(), 7).unwrap();
        let p = g.predict(&FeatureMapStack::zeros(1, 32, 41).unwrap()).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn narrow_input_reports_min_width() {
        let g = NetworkGraph::<f32>::mspn(tiny(), 0).unwrap();
        let err = g.forward(&FeatureMapStack::zeros(1, 32, 25).unwrap()).unwrap_err();
        assert!(matches!(err, Error::MinWidth { min_width: 26, got: 25 }));
        assert!(g.forward(&FeatureMapStack::zeros(1, 32, 26).unwrap()).is_ok());
        assert!(matches!(
            g.forward(&FeatureMapStack::zeros(1, 31, 40).unwrap()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn stage_shapes_at_minimum_width() {
        let g = NetworkGraph::<f32>::mspn(MspnConfig::default(), 0).unwrap();
        let s = g.stage_shapes(26).unwrap();
        assert_eq!(s.map(|x| (x.1, x.2)), [(15, 12), (7, 6), (3, 3), (1, 1)]);
        let s = g.stage_shapes(100).unwrap();
        assert_eq!(s.map(|x| x.2), [49, 24, 12, 10]);
    }

    #[test]
    fn forward_values_have_expected_shapes() {
        let g = NetworkGraph::<f64>::mspn(tiny(), 1).unwrap();
        let pass = g.forward(&image(30, 1)).unwrap();
        assert_eq!(pass.value("pool1").unwrap().as_maps().unwrap().shape(), (3, 15, 14));
        assert_eq!(pass.value("concat").unwrap().as_flat().unwrap().len(), 4 * 7 + 5 * 3 + 6);
        assert!((pass.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_dloss_gives_zero_gradients() {
        let g = NetworkGraph::<f64>::mspn(tiny(), 2).unwrap();
        let pass = g.forward(&image(30, 2)).unwrap();
        let mut grads = g.zero_grads();
        g.backward(&pass, 3, 0.0, &mut grads).unwrap();
        assert!(grads.is_all_zero());
    }

    #[test]
    fn backward_rejects_foreign_pass() {
        let a = NetworkGraph::<f64>::mspn(tiny(), 2).unwrap();
        let b = NetworkGraph::<f64>::mspn(tiny().with_stages(&[SspStage::Ssp3]), 2).unwrap();
        let pass = b.forward(&image(30, 2)).unwrap();
        let mut grads = a.zero_grads();
        assert!(matches!(a.backward(&pass, 0, 1.0, &mut grads), Err(Error::Contract(_))));
    }

    #[test]
    fn single_consumer_gradient_when_early_taps_disabled() {
        // with ssp-1 and ssp-2 off, blocking the (absent) tap edges is a no-op
        let g = NetworkGraph::<f64>::mspn(tiny().with_stages(&[SspStage::Ssp3]), 4).unwrap();
        let pass = g.forward(&image(34, 4)).unwrap();
        let mut full = g.zero_grads();
        g.backward(&pass, 1, 1.0, &mut full).unwrap();
        let mut masked = g.zero_grads();
        g.backward_masked(&pass, 1, 1.0, &mut masked, &[("ssp-1", "pool2"), ("ssp-2", "pool3")])
            .unwrap();
        assert_eq!(full, masked);
    }

    #[test]
    fn fan_in_is_additive() {
        let g = NetworkGraph::<f64>::mspn(tiny(), 5).unwrap();
        let pass = g.forward(&image(37, 5)).unwrap();
        let run = |blocked: &[(&str, &str)]| {
            let mut gr = g.zero_grads();
            g.backward_masked(&pass, 2, 1.0, &mut gr, blocked).unwrap();
            gr
        };
        for (node, a, b) in [("pool2", "conv3", "ssp-1"), ("pool3", "conv4", "ssp-2")] {
            let full = run(&[]);
            let mut sum = run(&[(a, node)]);
            sum.add_assign(&run(&[(b, node)])).unwrap();
            // the conv directly feeding the fan-out node only sees these two paths
            let tensors = match node {
                "pool2" => 0..4,
                _ => 4..6,
            };
            for t in tensors {
                for (x, y) in full.tensors[t].iter().zip(&sum.tensors[t]) {
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn patch_net_requires_square_input() {
        let cfg = PatchNetConfig {
            channels: [2, 2, 2, 2],
            fc_widths: [4, 4],
            ..PatchNetConfig::default()
        };
        let g = NetworkGraph::<f32>::patch_net(cfg, 0).unwrap();
        assert!(g.predict(&FeatureMapStack::zeros(1, 32, 32).unwrap()).is_ok());
        assert!(g.predict(&FeatureMapStack::zeros(1, 32, 40).unwrap()).is_err());
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let g = NetworkGraph::<f32>::mspn(tiny(), 3).unwrap();
        let back: NetworkGraph<f32> = g.cast::<f64>().cast();
        assert_eq!(g, back);
    }
}
