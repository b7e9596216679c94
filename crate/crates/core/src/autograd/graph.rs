use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{
    batch_norm, batch_norm_backward, bilinear_upsample_backward, bilinear_upsample_to, conv2d, conv2d_backward,
    l2_normalize_backward, l2_normalize_scale, maxpool, maxpool_backward, relu, relu_backward, softmax_backward,
    softmax_cross_entropy, softmax_cross_entropy_backward, softmax_pixelwise, BatchNormCache, ConvConfig, L2Cache,
    NormConfig, Phase, PoolConfig, RunningStats,
};
use crate::renet::{
    grid_to_map, map_to_grid, patch_grid, patch_grid_backward, renet_sweep_backward, renet_sweep_traced, CellKind,
    CellParams, Direction, Exec, ReNetLayer, SweepTrace,
};
use crate::tensor::{concat_channels, split_channels, Scalar, Tensor};

pub type NodeId = usize;

/// What a node computes from its inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Bound by name before each forward pass.
    Input { requires_grad: bool },
    /// Learned tensor. A frozen parameter passes gradient through its
    /// consumers but receives none itself.
    Param { frozen: bool },
    /// `[x, weight, bias]`
    Conv(ConvConfig),
    MaxPool(PoolConfig),
    Relu,
    /// `[x, gamma, beta]`
    BatchNorm(NormConfig),
    L2Norm { lambda: f64 },
    Concat,
    /// `[x, like]`: bilinear upsampling cropped to the spatial size of `like`.
    Upsample { factor: usize },
    PatchGrid { patch: (usize, usize) },
    /// `[grid, forward params.., backward params..]`
    Sweep { direction: Direction, kind: CellKind },
    GridToMap,
    Softmax,
    /// `[logits, labels]`, mean over non-ignored pixels.
    SoftmaxCrossEntropy { ignore: u8 },
    Add,
    Square,
    Sum,
    /// `[x, weights]`: `sum(x * weights)`, no gradient to the weights.
    WeightedSum,
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Conv(_) => "conv",
            Op::MaxPool(_) => "maxpool",
            Op::Relu => "relu",
            Op::BatchNorm(_) => "batchnorm",
            Op::L2Norm { .. } => "l2norm",
            Op::Concat => "concat",
            Op::Upsample { .. } => "upsample",
            Op::PatchGrid { .. } => "patchgrid",
            Op::Sweep { .. } => "sweep",
            Op::GridToMap => "gridtomap",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_xent",
            Op::Add => "add",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::WeightedSum => "weighted_sum",
        }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    Argmax(Vec<u32>),
    BatchNorm(BatchNormCache<T>),
    L2(L2Cache<T>),
    Sweep(SweepTrace<T>),
    Probs(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    value: Option<Tensor<T>>,
    cache: Cache<T>,
    stats: Option<RunningStats<T>>,
}

impl<T: Scalar> Node<T> {
    pub fn value(&self) -> Option<&Tensor<T>> {
        self.value.as_ref()
    }
}

/// A static computation graph. Nodes are appended in dependency order and
/// re-executed in that order on every [`Graph::forward`].
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
    grads: Vec<Option<Tensor<T>>>,
    loss: Option<NodeId>,
    phase: Phase,
    exec: Exec,
    fresh: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} does not match accumulated {:?}",
                    g.shape(),
                    acc.shape()
                )));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            names: HashMap::new(),
            grads: Vec::new(),
            loss: None,
            phase: Phase::Train,
            exec: Exec::Parallel,
            fresh: false,
        }
    }

    fn push(&mut self, name: &str, op: Op, inputs: Vec<NodeId>, value: Option<Tensor<T>>) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(Error::arg(format!("node input {bad} does not exist yet")));
        }
        let name = if name.is_empty() {
            format!("{}{id}", op.tag())
        } else {
            name.to_string()
        };
        if self.names.contains_key(&name) {
            return Err(Error::arg(format!("duplicate node name '{name}'")));
        }
        self.names.insert(name.clone(), id);
        self.nodes.push(Node {
            name,
            op,
            inputs,
            value,
            cache: Cache::None,
            stats: None,
        });
        self.fresh = false;
        Ok(id)
    }

    pub fn input(&mut self, name: &str, requires_grad: bool) -> Result<NodeId> {
        self.push(name, Op::Input { requires_grad }, vec![], None)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        self.push(name, Op::Param { frozen: false }, vec![], Some(value))
    }

    pub fn conv(&mut self, name: &str, x: NodeId, w: NodeId, b: NodeId, cfg: ConvConfig) -> Result<NodeId> {
        cfg.validate()?;
        self.push(name, Op::Conv(cfg), vec![x, w, b], None)
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId, cfg: PoolConfig) -> Result<NodeId> {
        cfg.validate()?;
        self.push(name, Op::MaxPool(cfg), vec![x], None)
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Relu, vec![x], None)
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId, gamma: NodeId, beta: NodeId, cfg: NormConfig) -> Result<NodeId> {
        cfg.validate()?;
        let channels = self.value_of(gamma).map(|g| g.len()).unwrap_or(1);
        let id = self.push(name, Op::BatchNorm(cfg), vec![x, gamma, beta], None)?;
        self.nodes[id].stats = Some(RunningStats::new(channels));
        Ok(id)
    }

    pub fn l2_norm(&mut self, name: &str, x: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("L2 scale must be positive, got {lambda}")));
        }
        self.push(name, Op::L2Norm { lambda }, vec![x], None)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::arg("concat needs at least one input"));
        }
        self.push(name, Op::Concat, xs.to_vec(), None)
    }

    pub fn upsample(&mut self, name: &str, x: NodeId, factor: usize, like: NodeId) -> Result<NodeId> {
        if factor < 1 {
            return Err(Error::arg("upsampling factor must be >= 1"));
        }
        self.push(name, Op::Upsample { factor }, vec![x, like], None)
    }

    pub fn patch_grid(&mut self, name: &str, x: NodeId, patch: (usize, usize)) -> Result<NodeId> {
        if patch.0 == 0 || patch.1 == 0 {
            return Err(Error::arg(format!("patch size {patch:?} must be at least 1x1")));
        }
        self.push(name, Op::PatchGrid { patch }, vec![x], None)
    }

    pub fn sweep(
        &mut self,
        name: &str,
        grid: NodeId,
        direction: Direction,
        kind: CellKind,
        forward: &[NodeId],
        backward: &[NodeId],
    ) -> Result<NodeId> {
        let want = match kind {
            CellKind::Lstm => 12,
            CellKind::Irnn => 3,
        };
        if forward.len() != want || backward.len() != want {
            return Err(Error::arg(format!("{} sweep needs {want} tensors per direction", kind.name())));
        }
        let mut inputs = vec![grid];
        inputs.extend_from_slice(forward);
        inputs.extend_from_slice(backward);
        self.push(name, Op::Sweep { direction, kind }, inputs, None)
    }

    pub fn grid_to_map(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::GridToMap, vec![x], None)
    }

    pub fn softmax(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Softmax, vec![x], None)
    }

    pub fn softmax_cross_entropy(&mut self, name: &str, logits: NodeId, labels: NodeId, ignore: u8) -> Result<NodeId> {
        self.push(name, Op::SoftmaxCrossEntropy { ignore }, vec![logits, labels], None)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(name, Op::Add, vec![a, b], None)
    }

    pub fn square(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Square, vec![x], None)
    }

    pub fn sum(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Sum, vec![x], None)
    }

    pub fn weighted_sum(&mut self, name: &str, x: NodeId, weights: NodeId) -> Result<NodeId> {
        self.push(name, Op::WeightedSum, vec![x, weights], None)
    }

    pub fn set_loss(&mut self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::arg(format!("loss node {id} does not exist")));
        }
        self.loss = Some(id);
        Ok(())
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.fresh = false;
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// How sweeps schedule their lanes. Results do not depend on it.
    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg(format!("no node named '{name}'")))
    }

    fn value_of(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id).and_then(|n| n.value.as_ref())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.value_of(id)
            .ok_or_else(|| Error::State(format!("node '{}' has no value yet", self.nodes[id].name)))
    }

    /// Gradient of the loss with respect to node `id` after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn loss_value(&self) -> Result<T> {
        let id = self.loss.ok_or_else(|| Error::State("no loss node set".into()))?;
        Ok(self.value(id)?.data()[0])
    }

    /// Ids of all parameter nodes in insertion order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Param { .. }))
            .collect()
    }

    /// Which branch every ReLU and max-pool took in the last forward pass.
    /// The graph is smooth between two parameter settings with equal
    /// routing, which lets finite-difference checks avoid kinks.
    pub fn routing(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match (&node.op, &node.cache) {
                (Op::MaxPool(_), Cache::Argmax(idx)) => out.extend_from_slice(idx),
                (Op::Sweep { kind: CellKind::Irnn, .. }, Cache::Sweep(trace)) => out.extend(trace.signs()),
                (Op::Relu, _) => {
                    if let Some(v) = node.value() {
                        out.extend(v.data().iter().map(|&x| (x > T::zero()) as u32));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn is_frozen(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Param { frozen: true })
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let id = self.id(name)?;
        match &mut self.nodes[id].op {
            Op::Param { frozen: f } => {
                *f = frozen;
                Ok(())
            }
            _ => Err(Error::arg(format!("'{name}' is not a parameter"))),
        }
    }

    /// Turns gradient tracking of an input node on or off, e.g. to probe
    /// how an output depends on individual input pixels.
    pub fn set_requires_grad(&mut self, name: &str, requires_grad: bool) -> Result<()> {
        let id = self.id(name)?;
        match &mut self.nodes[id].op {
            Op::Input { requires_grad: r } => {
                *r = requires_grad;
                Ok(())
            }
            _ => Err(Error::arg(format!("'{name}' is not an input"))),
        }
    }

    pub fn param_value(&self, name: &str) -> Result<&Tensor<T>> {
        let id = self.id(name)?;
        if !matches!(self.nodes[id].op, Op::Param { .. }) {
            return Err(Error::arg(format!("'{name}' is not a parameter")));
        }
        self.value(id)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        let node = &mut self.nodes[id];
        match (&node.op, &node.value) {
            (Op::Param { .. }, Some(old)) if old.shape() == value.shape() => {
                node.value = Some(value);
                self.fresh = false;
                Ok(())
            }
            (Op::Param { .. }, Some(old)) => Err(Error::shape(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                old.shape(),
                value.shape()
            ))),
            _ => Err(Error::arg(format!("'{name}' is not a parameter"))),
        }
    }

    /// Calls `f(name, value, grad)` for every trainable parameter that
    /// received a gradient in the last backward pass.
    pub fn update_params(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>, &Tensor<T>)) {
        for id in 0..self.nodes.len() {
            if !matches!(self.nodes[id].op, Op::Param { frozen: false }) {
                continue;
            }
            if let Some(g) = self.grads.get(id).and_then(Option::as_ref) {
                let node = &mut self.nodes[id];
                f(&node.name, node.value.as_mut().expect("parameters carry values"), g);
            }
        }
        self.fresh = false;
    }

    /// Batch-norm running statistics by node name.
    pub fn running_stats(&self) -> Vec<(&str, &RunningStats<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| n.stats.as_ref().map(|s| (n.name.as_str(), s)))
            .collect()
    }

    pub fn set_running_stats(&mut self, name: &str, stats: RunningStats<T>) -> Result<()> {
        let id = self.id(name)?;
        match &mut self.nodes[id].stats {
            Some(s) if s.mean.shape() == stats.mean.shape() && s.var.shape() == stats.var.shape() => {
                *s = stats;
                Ok(())
            }
            Some(_) => Err(Error::shape(format!("running statistics for '{name}' have the wrong width"))),
            None => Err(Error::arg(format!("'{name}' is not a batch-norm node"))),
        }
    }

    /// Binds an input tensor for the next forward pass.
    pub fn bind(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        if !matches!(self.nodes[id].op, Op::Input { .. }) {
            return Err(Error::arg(format!("'{name}' is not an input")));
        }
        self.nodes[id].value = Some(value);
        self.fresh = false;
        Ok(())
    }

    /// Binds `inputs` and evaluates every node.
    pub fn forward(&mut self, inputs: Vec<(&str, Tensor<T>)>) -> Result<()> {
        for (name, t) in inputs {
            self.bind(name, t)?;
        }
        self.run_forward()
    }

    /// Evaluates every node with the inputs already bound.
    pub fn run_forward(&mut self) -> Result<()> {
        self.fresh = false;
        self.grads.clear();
        for id in 0..self.nodes.len() {
            self.eval(id)?;
        }
        self.fresh = true;
        Ok(())
    }

    /// Evaluates nodes up to and including `id` only, e.g. predictions
    /// without binding labels. Backward is unavailable afterwards.
    pub fn run_forward_to(&mut self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::arg(format!("node {id} does not exist")));
        }
        self.fresh = false;
        self.grads.clear();
        for k in 0..=id {
            self.eval(k)?;
        }
        Ok(())
    }

    fn eval(&mut self, id: NodeId) -> Result<()> {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &mut rest[0];
        let arg = |k: usize| -> Result<&Tensor<T>> {
            let src = &before[node.inputs[k]];
            src.value
                .as_ref()
                .ok_or_else(|| Error::State(format!("input '{}' is unbound", src.name)))
        };
        let (value, cache) = match &node.op {
            Op::Input { .. } => {
                if node.value.is_none() {
                    return Err(Error::State(format!("input '{}' is unbound", node.name)));
                }
                return Ok(());
            }
            Op::Param { .. } => return Ok(()),
            Op::Conv(cfg) => (conv2d(arg(0)?, arg(1)?, arg(2)?, cfg)?, Cache::None),
            Op::MaxPool(cfg) => {
                let (y, idx) = maxpool(arg(0)?, cfg)?;
                (y, Cache::Argmax(idx))
            }
            Op::Relu => (relu(arg(0)?), Cache::None),
            Op::BatchNorm(cfg) => {
                let stats = node.stats.as_mut().expect("batch-norm nodes own running stats");
                let (y, c) = batch_norm(arg(0)?, arg(1)?, arg(2)?, stats, cfg, self.phase)?;
                (y, Cache::BatchNorm(c))
            }
            Op::L2Norm { lambda } => {
                let (y, c) = l2_normalize_scale(arg(0)?, *lambda)?;
                (y, Cache::L2(c))
            }
            Op::Concat => {
                let xs = (0..node.inputs.len()).map(arg).collect::<Result<Vec<_>>>()?;
                (concat_channels(&xs)?, Cache::None)
            }
            Op::Upsample { factor } => {
                let like = arg(1)?;
                let r = like.rank();
                if r < 2 {
                    return Err(Error::shape("upsample reference must be spatial"));
                }
                let target = (like.shape()[r - 2], like.shape()[r - 1]);
                (bilinear_upsample_to(arg(0)?, *factor, target)?, Cache::None)
            }
            Op::PatchGrid { patch } => (patch_grid(arg(0)?, patch.0, patch.1)?, Cache::None),
            Op::Sweep { direction, kind } => {
                let layer = sweep_layer(&node.inputs, before, *direction, *kind)?;
                let (y, trace) = renet_sweep_traced(arg(0)?, &layer, self.exec)?;
                (y, Cache::Sweep(trace))
            }
            Op::GridToMap => (grid_to_map(arg(0)?)?, Cache::None),
            Op::Softmax => (softmax_pixelwise(arg(0)?)?, Cache::None),
            Op::SoftmaxCrossEntropy { ignore } => {
                let (loss, probs) = softmax_cross_entropy(arg(0)?, arg(1)?, *ignore)?;
                (Tensor::scalar(loss), Cache::Probs(probs))
            }
            Op::Add => (arg(0)?.zip_map(arg(1)?, |a, b| a + b)?, Cache::None),
            Op::Square => (arg(0)?.map(|v| v * v), Cache::None),
            Op::Sum => (Tensor::scalar(arg(0)?.sum()), Cache::None),
            Op::WeightedSum => {
                let (x, w) = (arg(0)?, arg(1)?);
                if x.shape() != w.shape() {
                    return Err(Error::shape(format!(
                        "weighted sum: weights {:?} do not match {:?}",
                        w.shape(),
                        x.shape()
                    )));
                }
                let s = x.data().iter().zip(w.data()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                (Tensor::scalar(s), Cache::None)
            }
        };
        node.value = Some(value);
        node.cache = cache;
        Ok(())
    }

    /// Which nodes lie on a path from a trainable parameter or a
    /// gradient-requiring input.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            needs[id] = match node.op {
                Op::Input { requires_grad } => requires_grad,
                Op::Param { frozen } => !frozen,
                Op::SoftmaxCrossEntropy { .. } | Op::WeightedSum | Op::Upsample { .. } => needs[node.inputs[0]],
                _ => node.inputs.iter().any(|&i| needs[i]),
            };
        }
        needs
    }

    /// Reverse pass from the loss node. Gradients of trainable parameters and
    /// of inputs created with `requires_grad` are available through
    /// [`Graph::grad`] afterwards.
    pub fn backward(&mut self) -> Result<()> {
        if !self.fresh {
            return Err(Error::State("backward called before forward".into()));
        }
        let loss = self.loss.ok_or_else(|| Error::State("no loss node set".into()))?;
        let lv = self.value(loss)?;
        if lv.len() != 1 {
            return Err(Error::State(format!("loss must be a scalar, got shape {:?}", lv.shape())));
        }
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss).rev() {
            if !needs[id] {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let contributions = self.backprop_node(id, &gy, &needs)?;
            grads[id] = Some(gy);
            for (input, g) in contributions {
                add_into(&mut grads[input], g)?;
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            let keep = match node.op {
                Op::Param { frozen } => !frozen,
                Op::Input { requires_grad } => requires_grad,
                _ => true,
            };
            if !keep {
                grads[id] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: NodeId, gy: &Tensor<T>, needs: &[bool]) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let x = |k: usize| self.value(ins[k]);
        let need = |k: usize| needs[ins[k]];
        let mut out = Vec::new();
        match (&node.op, &node.cache) {
            (Op::Input { .. } | Op::Param { .. }, _) => {}
            (Op::Conv(cfg), _) => {
                let g = conv2d_backward(x(0)?, x(1)?, gy, cfg, need(0))?;
                if let Some(gx) = g.input {
                    out.push((ins[0], gx));
                }
                if need(1) {
                    out.push((ins[1], g.weight));
                }
                if need(2) {
                    out.push((ins[2], g.bias));
                }
            }
            (Op::MaxPool(_), Cache::Argmax(idx)) => {
                out.push((ins[0], maxpool_backward(x(0)?.shape(), idx, gy)));
            }
            (Op::Relu, _) => out.push((ins[0], relu_backward(x(0)?, gy))),
            (Op::BatchNorm(_), Cache::BatchNorm(c)) => {
                let g = batch_norm_backward(x(0)?.shape(), x(1)?, c, gy)?;
                out.push((ins[0], g.input));
                out.push((ins[1], g.gamma));
                out.push((ins[2], g.beta));
            }
            (Op::L2Norm { lambda }, Cache::L2(c)) => {
                out.push((ins[0], l2_normalize_backward(x(0)?, *lambda, c, gy)?));
            }
            (Op::Concat, _) => {
                let sizes = ins
                    .iter()
                    .map(|&i| self.value(i).and_then(|v| v.nchw().map(|d| d.1)))
                    .collect::<Result<Vec<_>>>()?;
                for (&i, g) in ins.iter().zip(split_channels(gy, &sizes)?) {
                    out.push((i, g));
                }
            }
            (Op::Upsample { factor }, _) => {
                out.push((ins[0], bilinear_upsample_backward(x(0)?.shape(), *factor, gy)?));
            }
            (Op::PatchGrid { patch }, _) => {
                out.push((ins[0], patch_grid_backward(x(0)?.shape(), patch.0, patch.1, gy)?));
            }
            (Op::Sweep { direction, kind }, Cache::Sweep(trace)) => {
                let layer = sweep_layer(ins, &self.nodes, *direction, *kind)?;
                let g = renet_sweep_backward(x(0)?, &layer, trace, gy, self.exec)?;
                out.push((ins[0], g.input));
                let per = (ins.len() - 1) / 2;
                let fwd = g.forward.tensors().into_iter().cloned();
                let bwd = g.backward.tensors().into_iter().cloned();
                for (k, t) in fwd.chain(bwd).enumerate() {
                    let i = ins[1 + k];
                    debug_assert!(k < 2 * per);
                    if needs[i] {
                        out.push((i, t));
                    }
                }
            }
            (Op::GridToMap, _) => out.push((ins[0], map_to_grid(gy)?)),
            (Op::Softmax, _) => out.push((ins[0], softmax_backward(self.value(id)?, gy)?)),
            (Op::SoftmaxCrossEntropy { ignore }, Cache::Probs(p)) => {
                out.push((ins[0], softmax_cross_entropy_backward(p, x(1)?, *ignore, gy.data()[0])?));
            }
            (Op::Add, _) => {
                out.push((ins[0], gy.clone()));
                out.push((ins[1], gy.clone()));
            }
            (Op::Square, _) => {
                let two = T::of(2.0);
                out.push((ins[0], x(0)?.zip_map(gy, |a, g| two * a * g)?));
            }
            (Op::Sum, _) => out.push((ins[0], Tensor::full(x(0)?.shape(), gy.data()[0])?)),
            (Op::WeightedSum, _) => {
                let s = gy.data()[0];
                out.push((ins[0], x(1)?.map(|w| w * s)));
            }
            (op, _) => {
                return Err(Error::State(format!(
                    "node '{}' ({}) has no forward record",
                    node.name,
                    op.tag()
                )))
            }
        }
        out.retain(|(i, _)| needs[*i]);
        Ok(out)
    }
}

fn sweep_layer<T: Scalar>(inputs: &[NodeId], nodes: &[Node<T>], direction: Direction, kind: CellKind) -> Result<ReNetLayer<T>> {
    let per = (inputs.len() - 1) / 2;
    let gather = |range: std::ops::Range<usize>| -> Result<Vec<Tensor<T>>> {
        inputs[range]
            .iter()
            .map(|&i| {
                nodes[i]
                    .value
                    .clone()
                    .ok_or_else(|| Error::State(format!("sweep parameter '{}' has no value", nodes[i].name)))
            })
            .collect()
    };
    Ok(ReNetLayer {
        direction,
        patch: (1, 1),
        forward: CellParams::from_tensors(kind, gather(1..1 + per)?)?,
        backward: CellParams::from_tensors(kind, gather(1 + per..1 + 2 * per)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", false).unwrap();
        g.forward(vec![("x", Tensor::scalar(7.0))]).unwrap();
        assert_eq!(g.value(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn relu_graph_clamps() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", false).unwrap();
        let y = g.relu("y", x).unwrap();
        g.forward(vec![("x", Tensor::scalar(-3.0))]).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec(&[3], vec![1.0, -2.0, 5.0]).unwrap()).unwrap();
        let s = g.sum("s", x).unwrap();
        g.set_loss(s).unwrap();
        g.run_forward().unwrap();
        g.backward().unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        let sq = g.square("sq", x).unwrap();
        let l = g.sum("l", sq).unwrap();
        g.set_loss(l).unwrap();
        g.run_forward().unwrap();
        g.backward().unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        let l = g.sum("l", x).unwrap();
        g.set_loss(l).unwrap();
        assert!(matches!(g.backward(), Err(Error::State(_))));
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", false).unwrap();
        g.relu("y", x).unwrap();
        assert!(matches!(g.run_forward(), Err(Error::State(_))));
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        // loss = sum(x + x) -> grad 2
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec(&[2], vec![0.5, 1.5]).unwrap()).unwrap();
        let a = g.add("a", x, x).unwrap();
        let l = g.sum("l", a).unwrap();
        g.set_loss(l).unwrap();
        g.run_forward().unwrap();
        g.backward().unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_param_passes_gradient_through() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap()).unwrap();
        let w = g.param("w", Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap()).unwrap();
        let b = g.param("b", Tensor::from_vec(&[1], vec![0.0]).unwrap()).unwrap();
        let y = g.conv("y", x, w, b, ConvConfig::new(1, 1, 1)).unwrap();
        let l = g.sum("l", y).unwrap();
        g.set_loss(l).unwrap();
        g.set_frozen("w", true).unwrap();
        g.run_forward().unwrap();
        g.backward().unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut g = Graph::<f64>::new();
        g.input("x", false).unwrap();
        assert!(g.input("x", false).is_err());
    }
}
