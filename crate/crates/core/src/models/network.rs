use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::{Graph, NodeId};
use crate::data::{crop_map, reflect_pad, save_pgm, symmetric_pad};
use crate::error::{Error, Result};
use crate::layers::{ConvConfig, NormMode, Phase, PoolConfig, RunningStats, IGNORE_LABEL};
use crate::renet::{Direction, Exec};
use crate::tensor::{decode_tensor, encode_tensor, Scalar, Tensor};

use super::spec::{spec_from_manifest, LayerKind, NetworkSpec, ParamInfo, DATA};

/// Name of the label input of the training graph.
pub const LABELS: &str = "labels";
/// Name of the loss node.
pub const LOSS: &str = "loss";

const MANIFEST_FILE: &str = "network.txt";
const PARAMS_FILE: &str = "params.txt";
const WEIGHTS_FILE: &str = "weights.bin";

/// A [`NetworkSpec`] instantiated as a differentiable graph.
///
/// Layer outputs are graph nodes named after their layer. Convolutions with
/// a ReLU add a `<layer>.pre` node, recurrent groups add `<layer>.grid`,
/// `<layer>.v` and `<layer>.h`.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    spec: NetworkSpec,
    graph: Graph<T>,
    params: Vec<ParamInfo>,
    outputs: HashMap<String, NodeId>,
    prob: NodeId,
}

impl<T: Scalar> Network<T> {
    /// Builds the graph with conv and recurrent weights at zero and batch
    /// norm scales at one.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.params()?;
        let mut g = Graph::new();
        let mut outputs = HashMap::new();
        outputs.insert(DATA.to_string(), g.input(DATA, false)?);
        let mut by_layer: HashMap<&str, Vec<&ParamInfo>> = HashMap::new();
        for p in &params {
            by_layer.entry(p.layer.as_str()).or_default().push(p);
        }
        let mut logits = None;
        for l in &spec.layers {
            let x = outputs[l.inputs[0].as_str()];
            let mk = |g: &mut Graph<T>, i: usize| -> Result<NodeId> {
                let info = by_layer[l.name.as_str()][i];
                let init = if info.name.ends_with(".gamma") {
                    Tensor::full(&info.shape, T::one())?
                } else {
                    Tensor::zeros(&info.shape)?
                };
                g.param(&info.name, init)
            };
            let out = match l.kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    dilation,
                    out_channels,
                    relu,
                } => {
                    let w = mk(&mut g, 0)?;
                    let b = mk(&mut g, 1)?;
                    let cfg = ConvConfig::new(spec.channels(&l.inputs[0])?, out_channels, kernel)
                        .with_stride(stride)
                        .with_dilation(dilation);
                    if relu {
                        let pre = g.conv(&format!("{}.pre", l.name), x, w, b, cfg)?;
                        g.relu(&l.name, pre)?
                    } else {
                        g.conv(&l.name, x, w, b, cfg)?
                    }
                }
                LayerKind::MaxPool { kernel, stride } => g.maxpool(&l.name, x, PoolConfig::new(kernel, stride))?,
                LayerKind::Norm(cfg) => match cfg.mode {
                    NormMode::Batch => {
                        let gamma = mk(&mut g, 0)?;
                        let beta = mk(&mut g, 1)?;
                        g.batch_norm(&l.name, x, gamma, beta, cfg)?
                    }
                    NormMode::L2 => g.l2_norm(&l.name, x, cfg.lambda.unwrap_or_default())?,
                    NormMode::None => x,
                },
                LayerKind::Concat => {
                    let xs: Vec<NodeId> = l.inputs.iter().map(|i| outputs[i.as_str()]).collect();
                    g.concat(&l.name, &xs)?
                }
                LayerKind::Group { patch, cell, .. } => {
                    let per = by_layer[l.name.as_str()].len() / 4;
                    let mut ids = Vec::with_capacity(4 * per);
                    for i in 0..4 * per {
                        ids.push(mk(&mut g, i)?);
                    }
                    let grid = g.patch_grid(&format!("{}.grid", l.name), x, patch)?;
                    let v = g.sweep(
                        &format!("{}.v", l.name),
                        grid,
                        Direction::Vertical,
                        cell,
                        &ids[0..per],
                        &ids[per..2 * per],
                    )?;
                    let h = g.sweep(
                        &format!("{}.h", l.name),
                        v,
                        Direction::Horizontal,
                        cell,
                        &ids[2 * per..3 * per],
                        &ids[3 * per..],
                    )?;
                    g.grid_to_map(&l.name, h)?
                }
                LayerKind::Upsample { factor } => g.upsample(&l.name, x, factor, outputs[DATA])?,
                LayerKind::Softmax => {
                    logits = Some(x);
                    g.softmax(&l.name, x)?
                }
            };
            outputs.insert(l.name.clone(), out);
        }
        let logits = logits.ok_or_else(|| Error::config("network does not end in a softmax"))?;
        let prob = outputs[spec.layers.last().expect("validated").name.as_str()];
        let labels = g.input(LABELS, false)?;
        let loss = g.softmax_cross_entropy(LOSS, logits, labels, IGNORE_LABEL)?;
        g.set_loss(loss)?;
        for p in &params {
            if spec.frozen.contains(&p.layer) {
                g.set_frozen(&p.name, true)?;
            }
        }
        Ok(Network {
            spec,
            graph: g,
            params,
            outputs,
            prob,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    /// Learned tensors in construction order.
    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.graph.param_value(name)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.graph.set_param(name, value)
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.graph.set_exec(exec);
    }

    /// Output node of a layer (or of [`DATA`]).
    pub fn layer_node(&self, layer: &str) -> Result<NodeId> {
        self.outputs
            .get(layer)
            .copied()
            .ok_or_else(|| Error::arg(format!("no layer named '{layer}'")))
    }

    /// The value a layer produced in the last forward pass.
    pub fn layer_output(&self, layer: &str) -> Result<&Tensor<T>> {
        self.graph.value(self.layer_node(layer)?)
    }

    /// Training-phase forward and backward on a minibatch. `images` is
    /// `[N,3,H,W]`, `labels` `[N,H,W]` with ignore marking unlabeled pixels.
    /// Returns the mean loss over scored pixels.
    pub fn forward_backward(&mut self, images: Tensor<T>, labels: Tensor<T>) -> Result<T> {
        self.graph.set_phase(Phase::Train);
        self.graph.forward(vec![(DATA, images), (LABELS, labels)])?;
        let loss = self.graph.loss_value()?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        self.graph.backward()?;
        Ok(loss)
    }

    /// Eval-phase class probabilities `[N,L,H,W]` for inputs no smaller than
    /// the minimum size.
    pub fn predict_batch(&mut self, images: Tensor<T>) -> Result<Tensor<T>> {
        self.graph.set_phase(Phase::Eval);
        self.graph.bind(DATA, images)?;
        self.graph.run_forward_to(self.prob)?;
        Ok(self.graph.value(self.prob)?.clone())
    }

    /// Probabilities at the input's own size. Inputs below the minimum size
    /// are reflection-padded, evaluated and cropped back.
    pub fn forward_variable_size(&mut self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let single = image.rank() == 3;
        let (n, c, h, w) = image.nchw()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        let pad = symmetric_pad((h, w), self.spec.min_size);
        let batch = image.clone().reshape(&[n, 3, h, w])?;
        let padded = if pad == (0, 0, 0, 0) { batch } else { reflect_pad(&batch, pad)? };
        let probs = self.predict_batch(padded)?;
        let out = if pad == (0, 0, 0, 0) {
            probs
        } else {
            crop_map(&probs, (pad.0, pad.2), (h, w))?
        };
        if single {
            out.reshape(&[self.spec.labels, h, w])
        } else {
            Ok(out)
        }
    }

    /// Writes every channel of `layer` for the first sample of the last
    /// forward pass as `<layer>_cNNN.pgm`, each min-max scaled to 0..255
    /// (constant channels become black).
    pub fn dump_feature_maps(&self, layer: &str, dir: &Path) -> Result<Vec<PathBuf>> {
        let t = self.layer_output(layer)?;
        let (_, c, h, w) = t.nchw()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let plane = h * w;
        let mut paths = Vec::with_capacity(c);
        for k in 0..c {
            let vals: Vec<f64> = t.data()[k * plane..(k + 1) * plane]
                .iter()
                .map(|v| v.to_f64().unwrap_or(0.0))
                .collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pixels: Vec<u8> = vals
                .iter()
                .map(|&v| {
                    if hi > lo {
                        ((v - lo) / (hi - lo) * 255.0).round() as u8
                    } else {
                        0
                    }
                })
                .collect();
            let path = dir.join(format!("{layer}_c{k:03}.pgm"));
            save_pgm(&path, w, h, &pixels)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Writes `network.txt`, `params.txt` and `weights.bin` (one record per
    /// parameter, then running mean and variance per batch-norm layer).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(MANIFEST_FILE, self.spec.manifest().as_bytes())?;
        let mut listing = String::new();
        let mut buf = Vec::new();
        for p in &self.params {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            listing.push_str(&format!("{} {}\n", p.name, dims.join("x")));
            encode_tensor(self.graph.param_value(&p.name)?, &mut buf);
        }
        for (name, stats) in self.graph.running_stats() {
            listing.push_str(&format!("{name}.running_mean {}\n", stats.mean.len()));
            listing.push_str(&format!("{name}.running_var {}\n", stats.var.len()));
            encode_tensor(&stats.mean, &mut buf);
            encode_tensor(&stats.var, &mut buf);
        }
        write(PARAMS_FILE, listing.as_bytes())?;
        write(WEIGHTS_FILE, &buf)
    }

    /// Rebuilds a network saved by [`Network::save`], converting weights to
    /// `T`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut net = Network::new(spec_from_manifest(&text)?)?;
        let wpath = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        let mut off = 0;
        let names: Vec<String> = net.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = decode_tensor(&bytes, &mut off)?.into_precision::<T>();
            net.graph.set_param(&name, t)?;
        }
        let bn: Vec<String> = net.graph.running_stats().iter().map(|(n, _)| n.to_string()).collect();
        for name in bn {
            let mean = decode_tensor(&bytes, &mut off)?.into_precision::<T>();
            let var = decode_tensor(&bytes, &mut off)?.into_precision::<T>();
            net.graph.set_running_stats(&name, RunningStats { mean, var })?;
        }
        if off != bytes.len() {
            return Err(Error::Parse {
                offset: off,
                message: format!("{} has trailing bytes", wpath.display()),
            });
        }
        Ok(net)
    }
}
