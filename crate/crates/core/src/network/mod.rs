//! Layer graphs for the models under pruning.
//!
//! A [`NetworkDef`] is a topologically ordered list of [`LayerNode`]s. Each
//! node reads from the network input or from earlier nodes. Convolutions carry
//! an input-channel mask; a cleared entry means the matching weight column is
//! held at exactly zero.

mod arch;
mod complexity;
mod prune;

pub use arch::{build_architecture, build_architecture_for, default_input_shape, ARCHITECTURES};
pub use complexity::{count_flops, count_params, Complexity, FLOP_CONVENTION};
pub use prune::{l20_norm, Liveness};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Running-average momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every batch-norm layer.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    /// `[out, in, kh, kw]`.
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub input_mask: Vec<bool>,
}

impl Conv {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kept_channels(&self) -> Vec<usize> {
        (0..self.input_mask.len())
            .filter(|&k| self.input_mask[k])
            .collect()
    }

    /// Zeroes every weight column whose input channel is masked off.
    pub fn enforce_mask(&mut self) {
        let [n, c, kh, kw] = self.weight.shape();
        let plane = kh * kw;
        let w = self.weight.data_mut();
        for j in 0..n {
            for k in 0..c {
                if !self.input_mask[k] {
                    w[(j * c + k) * plane..(j * c + k + 1) * plane].fill(0.0);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn update_running(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv(Conv),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// `theta` is `[d, m, 1, 1]`.
    FullyConnected {
        theta: Tensor,
    },
    ResidualAdd,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::BatchNorm(_) => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::FullyConnected { .. } => "fully-connected",
            LayerKind::ResidualAdd => "residual-add",
        }
    }

    /// Operators that act on each channel independently.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            LayerKind::BatchNorm(_) | LayerKind::Relu | LayerKind::MaxPool { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Source>,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: Vec<Source>) -> Self {
        LayerNode {
            name: name.into(),
            kind,
            inputs,
        }
    }
}

/// Per-channel input standardization applied before the first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = raw.shape();
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::invalid(format!(
                "normalization for {} channels applied to {:?}",
                self.mean.len(),
                raw.shape()
            )));
        }
        let plane = h * w;
        let mut out = raw.clone();
        let data = out.data_mut();
        for i in 0..n {
            for k in 0..c {
                let start = (i * c + k) * plane;
                for v in &mut data[start..start + plane] {
                    *v = (*v - self.mean[k]) / self.std[k];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDef {
    pub arch: String,
    /// Raw input extents `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub normalization: Normalization,
    /// Raw input channels read by the first layer, once compaction has removed some.
    pub input_channels: Option<Vec<usize>>,
    nodes: Vec<LayerNode>,
    #[serde(skip)]
    shapes: Vec<[usize; 3]>,
}

/// Which parameters of a trace require gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGrad {
    None,
    All,
}

/// Options for recording a (partial) forward pass on a tape.
#[derive(Clone, Debug)]
pub struct TraceSpec {
    pub mode: Mode,
    pub params: ParamGrad,
    /// First node to compute; outputs of earlier nodes that are read must be preset.
    pub start: usize,
    /// Last node to compute (inclusive). Defaults to the final node.
    pub upto: Option<usize>,
    pub preset: Vec<(usize, Var)>,
    /// Replaces a convolution's stored weight with a variable already on the tape.
    pub weight_override: Option<(usize, Var)>,
}

impl TraceSpec {
    pub fn new(mode: Mode) -> Self {
        TraceSpec {
            mode,
            params: ParamGrad::None,
            start: 0,
            upto: None,
            preset: Vec::new(),
            weight_override: None,
        }
    }

    pub fn with_grads(mut self) -> Self {
        self.params = ParamGrad::All;
        self
    }

    pub fn upto(mut self, node: usize) -> Self {
        self.upto = Some(node);
        self
    }
}

/// Parameter variables created for one node.
#[derive(Clone, Debug, Default)]
pub struct NodeParams {
    pub weight: Option<Var>,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
    pub theta: Option<Var>,
}

#[derive(Debug)]
pub struct Trace {
    pub outputs: Vec<Option<Var>>,
    pub params: Vec<NodeParams>,
    /// `(node, batch mean, batch variance)` for batch-norm nodes run in train mode.
    pub batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl Trace {
    pub fn output(&self, node: usize) -> Option<Var> {
        self.outputs.get(node).copied().flatten()
    }
}

impl NetworkDef {
    pub fn new(
        arch: impl Into<String>,
        input_shape: [usize; 3],
        num_classes: usize,
        nodes: Vec<LayerNode>,
    ) -> Result<Self> {
        let mut net = NetworkDef {
            arch: arch.into(),
            input_shape,
            num_classes,
            normalization: Normalization::identity(input_shape[0]),
            input_channels: None,
            nodes,
            shapes: Vec::new(),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &LayerNode {
        &self.nodes[idx]
    }

    pub fn node_mut(&mut self, idx: usize) -> &mut LayerNode {
        &mut self.nodes[idx]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn final_node(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Per-sample output extents `[C, H, W]` of a node.
    pub fn output_shape(&self, idx: usize) -> [usize; 3] {
        self.shapes[idx]
    }

    /// Extents `[C, H, W]` that the first layer sees after input channel selection.
    pub fn effective_input_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.input_shape;
        [self.input_channels.as_ref().map_or(c, |v| v.len()), h, w]
    }

    pub fn source_shape(&self, src: Source) -> [usize; 3] {
        match src {
            Source::Input => self.effective_input_shape(),
            Source::Node(i) => self.shapes[i],
        }
    }

    pub fn conv(&self, idx: usize) -> Result<&Conv> {
        match self.nodes.get(idx).map(|n| &n.kind) {
            Some(LayerKind::Conv(c)) => Ok(c),
            _ => Err(Error::invalid(format!("node {idx} is not a convolution"))),
        }
    }

    pub fn conv_mut(&mut self, idx: usize) -> Result<&mut Conv> {
        match self.nodes.get_mut(idx).map(|n| &mut n.kind) {
            Some(LayerKind::Conv(c)) => Ok(c),
            _ => Err(Error::invalid(format!("node {idx} is not a convolution"))),
        }
    }

    pub fn conv_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].kind, LayerKind::Conv(_)))
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Number of nodes reading each source; index 0 is the network input.
    pub fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len() + 1];
        for n in &self.nodes {
            for s in &n.inputs {
                match s {
                    Source::Input => counts[0] += 1,
                    Source::Node(i) => counts[i + 1] += 1,
                }
            }
        }
        counts
    }

    /// Checks ordering, arities and shape compatibility, and caches node shapes.
    pub fn validate(&mut self) -> Result<()> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.nodes.len());
        if self.nodes.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        if let Some(sel) = &self.input_channels {
            if sel.is_empty() || sel.iter().any(|&k| k >= self.input_shape[0]) {
                return Err(Error::invalid("input channel selection out of range"));
            }
        }
        let input = self.effective_input_shape();
        for (idx, node) in self.nodes.iter().enumerate() {
            let bad = |detail: String| Error::Geometry {
                op: "network",
                detail: format!("node {idx} ({}): {detail}", node.name),
            };
            let mut ins = Vec::with_capacity(node.inputs.len());
            for s in &node.inputs {
                ins.push(match *s {
                    Source::Input => input,
                    Source::Node(i) if i < idx => shapes[i],
                    Source::Node(i) => {
                        return Err(bad(format!("reads node {i}, which does not precede it")))
                    }
                });
            }
            let arity = if matches!(node.kind, LayerKind::ResidualAdd) {
                2
            } else {
                1
            };
            if ins.len() != arity {
                return Err(bad(format!("expects {arity} inputs, has {}", ins.len())));
            }
            let [c, h, w] = ins[0];
            let out = match &node.kind {
                LayerKind::Conv(conv) => {
                    let [o, ci, kh, kw] = conv.weight.shape();
                    if ci != c {
                        return Err(bad(format!("weight expects {ci} input channels, got {c}")));
                    }
                    if conv.input_mask.len() != ci {
                        return Err(bad(format!(
                            "input mask has {} entries for {ci} channels",
                            conv.input_mask.len()
                        )));
                    }
                    if conv.stride == 0 {
                        return Err(bad("zero stride".into()));
                    }
                    let oh = kernels::output_extent("conv2d", h, kh, conv.stride, conv.padding)?;
                    let ow = kernels::output_extent("conv2d", w, kw, conv.stride, conv.padding)?;
                    [o, oh, ow]
                }
                LayerKind::BatchNorm(bn) => {
                    let lens = [
                        bn.gamma.len(),
                        bn.beta.len(),
                        bn.running_mean.len(),
                        bn.running_var.len(),
                    ];
                    if lens.iter().any(|&l| l != c) {
                        return Err(bad(format!("parameter lengths {lens:?} for {c} channels")));
                    }
                    [c, h, w]
                }
                LayerKind::Relu => [c, h, w],
                LayerKind::MaxPool { window, stride } => {
                    if *stride == 0 {
                        return Err(bad("zero stride".into()));
                    }
                    [
                        c,
                        kernels::output_extent("max_pool", h, *window, *stride, 0)?,
                        kernels::output_extent("max_pool", w, *window, *stride, 0)?,
                    ]
                }
                LayerKind::GlobalAvgPool => {
                    if h * w == 0 {
                        return Err(bad("empty spatial extent".into()));
                    }
                    [c, 1, 1]
                }
                LayerKind::FullyConnected { theta } => {
                    let [d, m, _, _] = theta.shape();
                    if h != 1 || w != 1 || d != c {
                        return Err(bad(format!(
                            "theta {:?} for input [{c}, {h}, {w}]",
                            theta.shape()
                        )));
                    }
                    [m, 1, 1]
                }
                LayerKind::ResidualAdd => {
                    if ins[0] != ins[1] {
                        return Err(bad(format!(
                            "branch shapes {:?} and {:?} differ",
                            ins[0], ins[1]
                        )));
                    }
                    ins[0]
                }
            };
            shapes.push(out);
        }
        self.shapes = shapes;
        Ok(())
    }

    /// Normalizes a raw batch and applies the input channel selection.
    pub fn prepare_input(&self, raw: &Tensor) -> Result<Tensor> {
        let [_, c, h, w] = raw.shape();
        if [c, h, w] != self.input_shape {
            return Err(Error::Geometry {
                op: "forward",
                detail: format!(
                    "input {:?} does not match network input {:?}",
                    raw.shape(),
                    self.input_shape
                ),
            });
        }
        let x = self.normalization.apply(raw)?;
        match &self.input_channels {
            Some(sel) => x.select_channels(sel),
            None => Ok(x),
        }
    }

    /// Output of node `upto` (default: the final node) for a raw input batch.
    pub fn forward(&self, input: &Tensor, upto: Option<usize>, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let spec = TraceSpec {
            upto,
            ..TraceSpec::new(mode)
        };
        let target = upto.unwrap_or(self.final_node());
        let trace = self.trace(&mut tape, Some(input), &spec)?;
        let out = trace.output(target).expect("traced up to target");
        Ok(tape.value(out).clone())
    }

    /// Resumes a forward pass at `start` from cached outputs of earlier nodes.
    pub fn forward_from(
        &self,
        cached: &[(usize, Tensor)],
        start: usize,
        upto: Option<usize>,
        mode: Mode,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let preset = cached
            .iter()
            .map(|(i, t)| (*i, tape.constant(t.clone())))
            .collect();
        let spec = TraceSpec {
            start,
            upto,
            preset,
            ..TraceSpec::new(mode)
        };
        let target = upto.unwrap_or(self.final_node());
        let trace = self.trace(&mut tape, None, &spec)?;
        Ok(tape.value(trace.output(target).expect("traced")).clone())
    }

    /// Records nodes `spec.start..=upto` on `tape`.
    pub fn trace(
        &self,
        tape: &mut Tape,
        input: Option<&Tensor>,
        spec: &TraceSpec,
    ) -> Result<Trace> {
        let upto = spec.upto.unwrap_or(self.final_node());
        if upto >= self.nodes.len() || spec.start > upto {
            return Err(Error::invalid(format!(
                "layer range {}..={upto} outside network of {} layers",
                spec.start,
                self.nodes.len()
            )));
        }
        let input_var = match input {
            Some(raw) => Some(tape.constant(self.prepare_input(raw)?)),
            None => None,
        };
        let grads = spec.params == ParamGrad::All;
        let mut outputs: Vec<Option<Var>> = vec![None; self.nodes.len()];
        for &(i, v) in &spec.preset {
            if i < outputs.len() {
                outputs[i] = Some(v);
            }
        }
        let mut params = vec![NodeParams::default(); self.nodes.len()];
        let mut batch_stats = Vec::new();
        for idx in spec.start..=upto {
            let node = &self.nodes[idx];
            let mut ins = Vec::with_capacity(node.inputs.len());
            for s in &node.inputs {
                let v = match *s {
                    Source::Input => input_var,
                    Source::Node(i) => outputs[i],
                };
                ins.push(v.ok_or_else(|| {
                    Error::invalid(format!(
                        "node {idx} ({}) reads {s:?}, which is neither computed nor preset",
                        node.name
                    ))
                })?);
            }
            let out = match &node.kind {
                LayerKind::Conv(conv) => {
                    let w = match spec.weight_override {
                        Some((n, v)) if n == idx => v,
                        _ => tape.leaf(conv.weight.clone(), grads),
                    };
                    params[idx].weight = Some(w);
                    tape.conv2d(ins[0], w, conv.stride, conv.padding)?
                }
                LayerKind::BatchNorm(bn) => {
                    let c = bn.channels();
                    let g = tape.leaf(Tensor::from_vec([1, c, 1, 1], bn.gamma.clone())?, grads);
                    let b = tape.leaf(Tensor::from_vec([1, c, 1, 1], bn.beta.clone())?, grads);
                    params[idx].gamma = Some(g);
                    params[idx].beta = Some(b);
                    let stats = match spec.mode {
                        Mode::Train => BnStats::Batch,
                        Mode::Eval => BnStats::Fixed {
                            mean: &bn.running_mean,
                            var: &bn.running_var,
                        },
                    };
                    let (v, moments) = tape.batch_norm(ins[0], g, b, stats)?;
                    if let Some((m, var)) = moments {
                        batch_stats.push((idx, m, var));
                    }
                    v
                }
                LayerKind::Relu => tape.relu(ins[0])?,
                LayerKind::MaxPool { window, stride } => tape.max_pool(ins[0], *window, *stride)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(ins[0])?,
                LayerKind::FullyConnected { theta } => {
                    let t = tape.leaf(theta.clone(), grads);
                    params[idx].theta = Some(t);
                    tape.fully_connected(ins[0], t)?
                }
                LayerKind::ResidualAdd => tape.add(ins[0], ins[1])?,
            };
            outputs[idx] = Some(out);
        }
        Ok(Trace {
            outputs,
            params,
            batch_stats,
        })
    }

    /// Folds batch statistics from a train-mode trace into running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, Vec<f64>, Vec<f64>)]) {
        for (idx, mean, var) in stats {
            if let LayerKind::BatchNorm(bn) = &mut self.nodes[*idx].kind {
                bn.update_running(mean, var, BN_MOMENTUM);
            }
        }
    }

    /// Re-zeroes masked weight columns of every convolution.
    pub fn enforce_masks(&mut self) {
        for n in &mut self.nodes {
            if let LayerKind::Conv(c) = &mut n.kind {
                c.enforce_mask();
            }
        }
    }

    /// Kaiming-normal convolution weights, unit BN scale, `N(0, 1/d)` classifier weights.
    pub fn reinitialize(&mut self, rng: &mut Rng) {
        for n in &mut self.nodes {
            match &mut n.kind {
                LayerKind::Conv(c) => {
                    let [_, ci, kh, kw] = c.weight.shape();
                    let std = (2.0 / (ci * kh * kw) as f64).sqrt();
                    fill_normal(c.weight.data_mut(), std, rng);
                    c.enforce_mask();
                }
                LayerKind::BatchNorm(bn) => *bn = BatchNorm::new(bn.channels()),
                LayerKind::FullyConnected { theta } => {
                    let d = theta.shape()[0];
                    fill_normal(theta.data_mut(), (1.0 / d as f64).sqrt(), rng);
                }
                _ => {}
            }
        }
    }

    /// Ordered list of all learnable tensors' lengths, for optimizer state.
    pub fn param_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.kind {
                LayerKind::Conv(c) => out.push(c.weight.len()),
                LayerKind::BatchNorm(bn) => {
                    out.push(bn.channels());
                    out.push(bn.channels());
                }
                LayerKind::FullyConnected { theta } => out.push(theta.len()),
                _ => {}
            }
        }
        out
    }

    /// Mutable views of all learnable values, in [`NetworkDef::param_lengths`] order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for n in &mut self.nodes {
            match &mut n.kind {
                LayerKind::Conv(c) => out.push(c.weight.data_mut()),
                LayerKind::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                LayerKind::FullyConnected { theta } => out.push(theta.data_mut()),
                _ => {}
            }
        }
        out
    }

    /// Parameter variables of a trace, in [`NetworkDef::param_lengths`] order.
    pub fn param_vars(&self, trace: &Trace) -> Vec<Option<Var>> {
        let mut out = Vec::new();
        for (n, p) in self.nodes.iter().zip(&trace.params) {
            match &n.kind {
                LayerKind::Conv(_) => out.push(p.weight),
                LayerKind::BatchNorm(_) => {
                    out.push(p.gamma);
                    out.push(p.beta);
                }
                LayerKind::FullyConnected { .. } => out.push(p.theta),
                _ => {}
            }
        }
        out
    }

    /// Visits every stored numeric array in a fixed order: normalization,
    /// then per node conv weight, BN γ/β/mean/var, FC θ.
    pub(crate) fn visit_arrays_mut(&mut self, f: &mut dyn FnMut(ArrayMut<'_>)) {
        f(ArrayMut::Vector(&mut self.normalization.mean));
        f(ArrayMut::Vector(&mut self.normalization.std));
        for n in &mut self.nodes {
            match &mut n.kind {
                LayerKind::Conv(c) => f(ArrayMut::Tensor(&mut c.weight)),
                LayerKind::BatchNorm(bn) => {
                    f(ArrayMut::Vector(&mut bn.gamma));
                    f(ArrayMut::Vector(&mut bn.beta));
                    f(ArrayMut::Vector(&mut bn.running_mean));
                    f(ArrayMut::Vector(&mut bn.running_var));
                }
                LayerKind::FullyConnected { theta } => f(ArrayMut::Tensor(theta)),
                _ => {}
            }
        }
    }

    pub(crate) fn replace_nodes(&mut self, nodes: Vec<LayerNode>) -> Result<()> {
        self.nodes = nodes;
        self.validate()
    }
}

pub(crate) enum ArrayMut<'a> {
    Vector(&'a mut Vec<f64>),
    Tensor(&'a mut Tensor),
}

pub(crate) fn fill_normal(dst: &mut [f64], std: f64, rng: &mut Rng) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in dst {
        *v = normal.sample(rng);
    }
}
