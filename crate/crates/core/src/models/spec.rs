use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::layers::{ConvConfig, NormConfig, NormMode, PoolConfig};
use crate::renet::{cell_param_names, grid_dims, CellKind, Direction};

/// Name of the image input every spec starts from.
pub const DATA: &str = "data";

/// Default desk-scale width multiplier.
pub const DESK_SCALE: f64 = 1.0 / 16.0;
/// Default minimum input extent at desk scale.
pub const DESK_MIN_SIZE: usize = 48;

/// Full-scale channel widths of conv1..conv7.
const FCN_WIDTHS: [usize; 7] = [64, 128, 256, 512, 512, 1024, 1024];
/// Full-scale hidden width per direction of the H-ReNet group.
const HRENET_HIDDEN: usize = 120;
/// Hidden widths per direction of the three N-ReNet groups at scale 1; desk
/// scale 1/16 gives 16, 32, 64.
const NRENET_HIDDEN: [usize; 3] = [256, 512, 1024];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    NReNet,
    BaselineFcn,
    HReNet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::NReNet => "nrenet",
            Arch::BaselineFcn => "fcn",
            Arch::HReNet => "hrenet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nrenet" | "n-renet" => Ok(Arch::NReNet),
            "fcn" | "baseline" | "baseline_fcn" => Ok(Arch::BaselineFcn),
            "hrenet" | "h-renet" => Ok(Arch::HReNet),
            other => Err(Error::config(format!("unknown model '{other}' (expected nrenet, fcn or hrenet)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        dilation: usize,
        out_channels: usize,
        relu: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Norm(NormConfig),
    Concat,
    /// Vertical then horizontal ReNet layer; `hidden` per direction.
    Group {
        patch: (usize, usize),
        hidden: (usize, usize),
        cell: CellKind,
    },
    /// Bilinear upsampling cropped to the input resolution.
    Upsample {
        factor: usize,
    },
    Softmax,
}

impl LayerKind {
    fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool { .. } => "max",
            LayerKind::Norm(c) => match c.mode {
                NormMode::Batch => "batchnorm",
                NormMode::L2 => "l2norm",
                NormMode::None => "identity",
            },
            LayerKind::Concat => "concat",
            LayerKind::Group { .. } => "renetx2",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Softmax => "softmax",
        }
    }

    fn config(&self) -> String {
        match self {
            LayerKind::Conv {
                kernel,
                stride,
                dilation,
                ..
            } => format!("{kernel},{stride},{dilation}"),
            LayerKind::MaxPool { kernel, stride } => format!("{kernel},{stride}"),
            LayerKind::Norm(c) => match c.mode {
                NormMode::L2 => format!("{}", c.lambda.unwrap_or(0.0)),
                _ => "-".into(),
            },
            LayerKind::Concat | LayerKind::Softmax => "-".into(),
            LayerKind::Group { patch, cell, .. } => {
                if patch.0 == patch.1 {
                    format!("{},{}", patch.0, cell.name())
                } else {
                    format!("{}x{},{}", patch.0, patch.1, cell.name())
                }
            }
            LayerKind::Upsample { factor } => format!("{factor}x"),
        }
    }

    fn activation(&self) -> &'static str {
        match self {
            LayerKind::Conv { relu: true, .. } => "relu",
            LayerKind::Softmax => "smax",
            _ => "idn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Source layers; [`DATA`] names the image.
    pub inputs: Vec<String>,
}

/// Output shape of one layer for a concrete input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Everything needed to rebuild a network: the construction options plus
/// the resulting layer list.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub scale: f64,
    pub labels: usize,
    pub min_size: (usize, usize),
    pub mlfb: bool,
    pub norm: NormConfig,
    pub cell: CellKind,
    pub layers: Vec<LayerSpec>,
    /// Layers whose parameters receive no updates.
    pub frozen: BTreeSet<String>,
}

/// Builder options for all three architectures.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub scale: f64,
    pub labels: usize,
    pub min_size: (usize, usize),
    pub mlfb: bool,
    pub norm: NormConfig,
    pub cell: CellKind,
    pub frozen: BTreeSet<String>,
}

impl ModelConfig {
    pub fn new(arch: Arch, scale: f64, labels: usize) -> Self {
        ModelConfig {
            arch,
            scale,
            labels,
            min_size: (DESK_MIN_SIZE, DESK_MIN_SIZE),
            mlfb: false,
            norm: NormConfig::new(NormMode::None),
            cell: CellKind::Lstm,
            frozen: BTreeSet::new(),
        }
    }

    pub fn build(&self) -> Result<NetworkSpec> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!("width scale must be positive, got {}", self.scale)));
        }
        if self.labels < 2 || self.labels > 255 {
            return Err(Error::config(format!("label count must lie in 2..=255, got {}", self.labels)));
        }
        if self.min_size.0 == 0 || self.min_size.1 == 0 {
            return Err(Error::config("minimum input size must be positive"));
        }
        self.norm.validate()?;
        let layers = match self.arch {
            Arch::NReNet => nrenet_layers(self.scale, self.labels, self.cell),
            Arch::BaselineFcn => fcn_layers(self.scale, self.labels, None),
            Arch::HReNet => fcn_layers(self.scale, self.labels, Some((self.mlfb, self.norm, self.cell))),
        };
        let spec = NetworkSpec {
            arch: self.arch,
            scale: self.scale,
            labels: self.labels,
            min_size: self.min_size,
            mlfb: self.mlfb && self.arch == Arch::HReNet,
            norm: if self.arch == Arch::HReNet {
                self.norm
            } else {
                NormConfig::new(NormMode::None)
            },
            cell: self.cell,
            layers,
            frozen: self.frozen.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `max(1, round(c * scale))`
pub fn scaled(c: usize, scale: f64) -> usize {
    ((c as f64 * scale).round() as usize).max(1)
}

fn conv(name: &str, input: &str, kernel: usize, dilation: usize, out_channels: usize, relu: bool) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Conv {
            kernel,
            stride: 1,
            dilation,
            out_channels,
            relu,
        },
        inputs: vec![input.into()],
    }
}

fn layer(name: &str, kind: LayerKind, inputs: &[&str]) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind,
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
    }
}

/// IRNN hidden widths whose group parameter count is closest to that of an
/// LSTM group with widths `lstm` on `p` inputs.
pub fn irnn_matched_widths(p: usize, lstm: (usize, usize)) -> (usize, usize) {
    let target = |d1: usize, d2: usize, kind: CellKind| {
        2 * kind.param_count(p, d1) + 2 * kind.param_count(2 * d1, d2)
    };
    let goal = target(lstm.0, lstm.1, CellKind::Lstm) as i64;
    let mut best = (1, 1);
    let mut best_gap = i64::MAX;
    for d1 in 1..=4 * lstm.0 + 4 {
        for d2 in 1..=4 * lstm.1 + 4 {
            let gap = (target(d1, d2, CellKind::Irnn) as i64 - goal).abs();
            if gap < best_gap {
                best_gap = gap;
                best = (d1, d2);
            }
        }
    }
    best
}

fn group_kind(p: usize, hidden: (usize, usize), patch: (usize, usize), cell: CellKind) -> LayerKind {
    let hidden = match cell {
        CellKind::Lstm => hidden,
        CellKind::Irnn => irnn_matched_widths(p, hidden),
    };
    LayerKind::Group { patch, hidden, cell }
}

fn fcn_layers(scale: f64, labels: usize, hybrid: Option<(bool, NormConfig, CellKind)>) -> Vec<LayerSpec> {
    let c: Vec<usize> = FCN_WIDTHS.iter().map(|&w| scaled(w, scale)).collect();
    let mut layers = Vec::new();
    let mut prev = DATA.to_string();
    let blocks: [(usize, usize, usize, usize, (usize, usize)); 5] = [
        (1, 2, c[0], 1, (2, 2)),
        (2, 2, c[1], 1, (2, 2)),
        (3, 3, c[2], 1, (2, 2)),
        (4, 3, c[3], 1, (3, 1)),
        (5, 3, c[4], 2, (3, 1)),
    ];
    for (block, reps, width, dilation, (pk, ps)) in blocks {
        for r in 1..=reps {
            let name = format!("conv{block}_{r}");
            layers.push(conv(&name, &prev, 3, dilation, width, true));
            prev = name;
        }
        let pool = format!("pool{block}");
        layers.push(layer(&pool, LayerKind::MaxPool { kernel: pk, stride: ps }, &[&prev]));
        prev = pool;
    }
    layers.push(conv("conv6", &prev, 3, 12, c[5], true));
    layers.push(conv("conv7", "conv6", 3, 1, c[6], true));
    prev = "conv7".into();
    if let Some((mlfb, norm, cell)) = hybrid {
        let sources: Vec<(&str, usize)> = if mlfb {
            vec![("pool4", c[3]), ("pool5", c[4]), ("conv7", c[6])]
        } else {
            vec![("conv7", c[6])]
        };
        let mut normed = Vec::new();
        for (src, _) in &sources {
            if norm.mode == NormMode::None {
                normed.push(src.to_string());
            } else {
                let name = format!("{src}_norm");
                layers.push(layer(&name, LayerKind::Norm(norm), &[src]));
                normed.push(name);
            }
        }
        if normed.len() > 1 {
            let refs: Vec<&str> = normed.iter().map(String::as_str).collect();
            layers.push(layer("concat", LayerKind::Concat, &refs));
            prev = "concat".into();
        } else {
            prev = normed.pop().unwrap();
        }
        let p: usize = sources.iter().map(|s| s.1).sum();
        let d = scaled(HRENET_HIDDEN, scale);
        layers.push(layer("renet1", group_kind(p, (d, d), (1, 1), cell), &[&prev]));
        prev = "renet1".into();
    }
    layers.push(conv("conv8", &prev, 1, 1, labels, false));
    layers.push(layer("upsample", LayerKind::Upsample { factor: 8 }, &["conv8"]));
    layers.push(layer("prob", LayerKind::Softmax, &["upsample"]));
    layers
}

fn nrenet_layers(scale: f64, labels: usize, cell: CellKind) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = DATA.to_string();
    let mut p = 3 * 2 * 2;
    for (k, &base) in NRENET_HIDDEN.iter().enumerate() {
        let d = scaled(base, scale);
        let patch = if k == 0 { (2, 2) } else { (1, 1) };
        let name = format!("renet{}", k + 1);
        let kind = group_kind(p, (d, d), patch, cell);
        if let LayerKind::Group { hidden, .. } = kind {
            p = 2 * hidden.1;
        }
        layers.push(layer(&name, kind, &[&prev]));
        prev = name;
    }
    layers.push(conv("conv1", &prev, 1, 1, labels, false));
    layers.push(layer("upsample", LayerKind::Upsample { factor: 2 }, &["conv1"]));
    layers.push(layer("prob", LayerKind::Softmax, &["upsample"]));
    layers
}

/// Baseline FCN: dilated conv1..conv8 with stride-1 pool4/pool5 and an 8x
/// upsample.
pub fn build_baseline_fcn(scale: f64, labels: usize) -> Result<NetworkSpec> {
    ModelConfig::new(Arch::BaselineFcn, scale, labels).build()
}

/// The baseline FCN with one recurrent group between conv7 and conv8.
pub fn build_hrenet(scale: f64, labels: usize, mlfb: bool, norm: NormConfig) -> Result<NetworkSpec> {
    let mut cfg = ModelConfig::new(Arch::HReNet, scale, labels);
    cfg.mlfb = mlfb;
    cfg.norm = norm;
    cfg.build()
}

/// Three recurrent groups (2x2 patches, then 1x1), a 1x1 classifier and a 2x
/// upsample.
pub fn build_nrenet(scale: f64, labels: usize) -> Result<NetworkSpec> {
    ModelConfig::new(Arch::NReNet, scale, labels).build()
}

/// Shape and role of one learned tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub layer: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    /// Any LSTM tensor, or IRNN input weights and bias.
    Recurrent,
    /// IRNN recurrent matrix.
    IrnnRecurrent,
    IrnnBias,
}

impl NetworkSpec {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            scale: self.scale,
            labels: self.labels,
            min_size: self.min_size,
            mlfb: self.mlfb,
            norm: self.norm,
            cell: self.cell,
            frozen: self.frozen.clone(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    fn channel_map(&self) -> Result<HashMap<&str, usize>> {
        let mut ch: HashMap<&str, usize> = HashMap::new();
        ch.insert(DATA, 3);
        for l in &self.layers {
            if ch.contains_key(l.name.as_str()) {
                return Err(Error::config(format!("layer name '{}' used twice", l.name)));
            }
            let ins = l
                .inputs
                .iter()
                .map(|i| {
                    ch.get(i.as_str())
                        .copied()
                        .ok_or_else(|| Error::config(format!("layer '{}' reads unknown layer '{i}'", l.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            if ins.is_empty() {
                return Err(Error::config(format!("layer '{}' has no input", l.name)));
            }
            if !matches!(l.kind, LayerKind::Concat) && ins.len() != 1 {
                return Err(Error::config(format!("layer '{}' takes exactly one input", l.name)));
            }
            let out = match l.kind {
                LayerKind::Conv { out_channels, .. } => out_channels,
                LayerKind::Group { hidden, .. } => 2 * hidden.1,
                LayerKind::Concat => ins.iter().sum(),
                _ => ins[0],
            };
            ch.insert(&l.name, out);
        }
        Ok(ch)
    }

    /// Output channels of every layer, by name.
    pub fn channels(&self, name: &str) -> Result<usize> {
        self.channel_map()?
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg(format!("no layer named '{name}'")))
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channel_map()?;
        let last = self.layers.last().ok_or_else(|| Error::config("network has no layers"))?;
        if ch[last.name.as_str()] != self.labels {
            return Err(Error::config(format!(
                "final layer emits {} channels, expected {}",
                ch[last.name.as_str()],
                self.labels
            )));
        }
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    dilation,
                    out_channels,
                    ..
                } => ConvConfig::new(ch[l.inputs[0].as_str()], out_channels, kernel)
                    .with_stride(stride)
                    .with_dilation(dilation)
                    .validate()?,
                LayerKind::MaxPool { kernel, stride } => PoolConfig::new(kernel, stride).validate()?,
                LayerKind::Norm(c) => c.validate()?,
                LayerKind::Group { patch, hidden, .. } => {
                    if patch.0 == 0 || patch.1 == 0 || hidden.0 == 0 || hidden.1 == 0 {
                        return Err(Error::config(format!("group '{}' has a zero extent", l.name)));
                    }
                }
                LayerKind::Upsample { factor } if factor == 0 => {
                    return Err(Error::config("upsampling factor must be >= 1"));
                }
                _ => {}
            }
        }
        for f in &self.frozen {
            if self.layer(f).is_none() {
                return Err(Error::config(format!("frozen layer '{f}' does not exist")));
            }
        }
        Ok(())
    }

    /// Symbolic shape propagation for an `H x W` input.
    pub fn infer_shapes(&self, height: usize, width: usize) -> Result<Vec<LayerShape>> {
        if height == 0 || width == 0 {
            return Err(Error::shape("input extents must be positive"));
        }
        let ch = self.channel_map()?;
        let mut dims: HashMap<&str, (usize, usize)> = HashMap::new();
        dims.insert(DATA, (height, width));
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let src = dims[l.inputs[0].as_str()];
            let hw = match l.kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    dilation,
                    out_channels,
                    ..
                } => ConvConfig::new(ch[l.inputs[0].as_str()], out_channels, kernel)
                    .with_stride(stride)
                    .with_dilation(dilation)
                    .output_size(src.0, src.1)?,
                LayerKind::MaxPool { kernel, stride } => PoolConfig::new(kernel, stride).output_size(src.0, src.1),
                LayerKind::Concat => {
                    for i in &l.inputs {
                        if dims[i.as_str()] != src {
                            return Err(Error::shape(format!(
                                "concat '{}' mixes resolutions {:?} and {:?}",
                                l.name,
                                src,
                                dims[i.as_str()]
                            )));
                        }
                    }
                    src
                }
                LayerKind::Group { patch, .. } => grid_dims(src.0, src.1, patch),
                LayerKind::Upsample { factor } => {
                    if src.0 * factor < height || src.1 * factor < width {
                        return Err(Error::shape(format!(
                            "upsampling {src:?} by {factor} cannot cover {height}x{width}"
                        )));
                    }
                    (height, width)
                }
                LayerKind::Norm(_) | LayerKind::Softmax => src,
            };
            dims.insert(&l.name, hw);
            out.push(LayerShape {
                name: l.name.clone(),
                channels: ch[l.name.as_str()],
                height: hw.0,
                width: hw.1,
            });
        }
        Ok(out)
    }

    /// Product of pooling strides between the input and the classifier.
    pub fn downsampling(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::MaxPool { stride, .. } => stride,
                LayerKind::Conv { stride, .. } => stride,
                LayerKind::Group { patch, .. } => patch.0,
                _ => 1,
            })
            .product()
    }

    /// Side length in input pixels of the window that can influence one
    /// output pixel, or `None` when some layer mixes the whole map (a
    /// recurrent group or L2 normalization). Batch normalization counts as
    /// pointwise, which holds for inference.
    pub fn receptive_field(&self) -> Option<usize> {
        let mut rf: HashMap<&str, (usize, usize)> = HashMap::new();
        rf.insert(DATA, (1, 1));
        for l in &self.layers {
            let (r, jump) = rf[l.inputs[0].as_str()];
            let next = match l.kind {
                LayerKind::Conv { kernel, stride, dilation, .. } => {
                    (r + dilation * (kernel - 1) * jump, jump * stride)
                }
                LayerKind::MaxPool { kernel, stride } => (r + (kernel - 1) * jump, jump * stride),
                LayerKind::Concat => {
                    let widest = l.inputs.iter().map(|i| rf[i.as_str()].0).max().unwrap_or(r);
                    (widest, jump)
                }
                LayerKind::Group { .. } => return None,
                LayerKind::Norm(c) if c.mode == NormMode::L2 => return None,
                // two neighbouring coarse samples feed every output pixel
                LayerKind::Upsample { factor } => (r + jump, (jump / factor).max(1)),
                LayerKind::Norm(_) | LayerKind::Softmax => (r, jump),
            };
            rf.insert(&l.name, next);
        }
        self.layers.last().map(|l| rf[l.name.as_str()].0)
    }

    /// Every learned tensor in graph construction order.
    pub fn params(&self) -> Result<Vec<ParamInfo>> {
        let ch = self.channel_map()?;
        let mut out = Vec::new();
        for l in &self.layers {
            let cin = ch[l.inputs[0].as_str()];
            let mut push = |name: String, shape: Vec<usize>, role: ParamRole| {
                out.push(ParamInfo {
                    name,
                    layer: l.name.clone(),
                    shape,
                    role,
                })
            };
            match l.kind {
                LayerKind::Conv { kernel, out_channels, .. } => {
                    push(format!("{}.W", l.name), vec![out_channels, cin, kernel, kernel], ParamRole::ConvWeight);
                    push(format!("{}.b", l.name), vec![out_channels], ParamRole::ConvBias);
                }
                LayerKind::Norm(c) if c.mode == NormMode::Batch => {
                    push(format!("{}.gamma", l.name), vec![cin], ParamRole::NormScale);
                    push(format!("{}.beta", l.name), vec![cin], ParamRole::NormShift);
                }
                LayerKind::Group { patch, hidden, cell } => {
                    let k = group_index(&l.name);
                    let layers = [
                        (Direction::Vertical, cin * patch.0 * patch.1, hidden.0),
                        (Direction::Horizontal, 2 * hidden.0, hidden.1),
                    ];
                    for (dir, p, d) in layers {
                        for backward in [false, true] {
                            let names = cell_param_names(k, dir, backward, cell);
                            for (i, name) in names.into_iter().enumerate() {
                                let (shape, role) = match (i % 3, cell) {
                                    (0, _) => (vec![d, p], ParamRole::Recurrent),
                                    (1, CellKind::Lstm) => (vec![d, d], ParamRole::Recurrent),
                                    (1, CellKind::Irnn) => (vec![d, d], ParamRole::IrnnRecurrent),
                                    (_, CellKind::Lstm) => (vec![d], ParamRole::Recurrent),
                                    (_, CellKind::Irnn) => (vec![d], ParamRole::IrnnBias),
                                };
                                push(name, shape, role);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.params()?.iter().map(|p| p.shape.iter().product::<usize>()).sum())
    }

    /// Parameters inside recurrent groups only.
    pub fn recurrent_param_count(&self) -> Result<usize> {
        Ok(self
            .params()?
            .iter()
            .filter(|p| matches!(p.role, ParamRole::Recurrent | ParamRole::IrnnRecurrent | ParamRole::IrnnBias))
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    /// Human-readable description: `key=value` construction options, then
    /// one row per layer (name, type, config, channels, activation, inputs).
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model={}", self.arch.name());
        let _ = writeln!(s, "scale={}", self.scale);
        let _ = writeln!(s, "labels={}", self.labels);
        let _ = writeln!(s, "min_size={}x{}", self.min_size.0, self.min_size.1);
        let _ = writeln!(s, "mlfb={}", self.mlfb);
        let _ = writeln!(s, "norm={}", self.norm.mode.name());
        if let Some(l) = self.norm.lambda {
            let _ = writeln!(s, "lambda={l}");
        }
        let _ = writeln!(s, "cell={}", self.cell.name());
        let frozen: Vec<&str> = self.frozen.iter().map(String::as_str).collect();
        let _ = writeln!(s, "frozen={}", frozen.join(","));
        let ch = self.channel_map().unwrap_or_default();
        let _ = writeln!(s, "# layer type config channels activation inputs");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "# {} {} {} {} {} {}",
                l.name,
                l.kind.type_name(),
                l.kind.config(),
                ch.get(l.name.as_str()).copied().unwrap_or(0),
                l.kind.activation(),
                l.inputs.join("+")
            );
        }
        s
    }
}

/// Rebuilds a spec from the `key=value` header written by
/// [`NetworkSpec::manifest`]; layer rows are regenerated, not parsed.
pub fn spec_from_manifest(text: &str) -> Result<NetworkSpec> {
    let kv = KeyValues::parse(text)?;
    let arch = Arch::parse(&kv.require::<String>("model")?)?;
    let mut cfg = ModelConfig::new(arch, kv.require("scale")?, kv.require("labels")?);
    cfg.min_size = kv.size_or("min_size", cfg.min_size)?;
    cfg.mlfb = kv.parse_or("mlfb", false)?;
    let mode = NormMode::parse(kv.get("norm").unwrap_or("none"))?;
    cfg.norm = NormConfig::new(mode);
    if let Some(l) = kv.get("lambda") {
        cfg.norm.lambda = Some(l.parse().map_err(|_| Error::config(format!("invalid lambda {l:?}")))?);
    }
    cfg.cell = CellKind::parse(kv.get("cell").unwrap_or("lstm"))?;
    cfg.frozen = kv
        .get("frozen")
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    cfg.build()
}

/// `renet3` -> 3
fn group_index(name: &str) -> usize {
    name.trim_start_matches(|c: char| !c.is_ascii_digit()).parse().unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_widths(spec: &NetworkSpec) -> Vec<usize> {
        spec.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn full_scale_channel_row() {
        let spec = build_baseline_fcn(1.0, 21).unwrap();
        let blocks = ["conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3", "conv6", "conv7", "conv8"];
        let row: Vec<usize> = blocks.iter().map(|b| spec.channels(b).unwrap()).collect();
        assert_eq!(row, vec![64, 128, 256, 512, 512, 1024, 1024, 21]);
        assert_eq!(conv_widths(&spec).len(), 16);
    }

    #[test]
    fn stride_reduced_to_eight() {
        let spec = build_baseline_fcn(DESK_SCALE, 4).unwrap();
        assert_eq!(spec.downsampling(), 8);
        let shapes = spec.infer_shapes(64, 64).unwrap();
        let at = |n: &str| shapes.iter().find(|s| s.name == n).unwrap();
        for n in ["pool3", "conv4_1", "pool4", "conv5_3", "pool5", "conv6", "conv7", "conv8"] {
            assert_eq!((at(n).height, at(n).width), (8, 8), "{n}");
        }
        assert_eq!((at("prob").height, at("prob").width, at("prob").channels), (64, 64, 4));
    }

    #[test]
    fn hrenet_group_and_mlfb_width() {
        let spec = build_hrenet(1.0, 21, false, NormConfig::new(NormMode::None)).unwrap();
        let g = spec.layer("renet1").unwrap();
        assert_eq!(g.inputs, vec!["conv7".to_string()]);
        assert!(matches!(g.kind, LayerKind::Group { patch: (1, 1), .. }));
        assert_eq!(spec.channels("renet1").unwrap(), 240);
        let spec = build_hrenet(1.0, 21, true, NormConfig::new(NormMode::Batch)).unwrap();
        assert_eq!(spec.channels("concat").unwrap(), 2048);
    }

    #[test]
    fn l2_without_scale_is_config_error() {
        let mut norm = NormConfig::new(NormMode::L2);
        norm.lambda = None;
        assert!(matches!(build_hrenet(DESK_SCALE, 4, true, norm), Err(Error::Config(_))));
    }

    #[test]
    fn hybrid_differs_from_baseline_only_by_group() {
        let base = build_baseline_fcn(DESK_SCALE, 4).unwrap();
        let hyb = build_hrenet(DESK_SCALE, 4, false, NormConfig::new(NormMode::None)).unwrap();
        let names = |s: &NetworkSpec| s.layers.iter().map(|l| l.name.clone()).collect::<Vec<_>>();
        let extra: Vec<_> = names(&hyb).into_iter().filter(|n| !names(&base).contains(n)).collect();
        assert_eq!(extra, vec!["renet1".to_string()]);
        for l in &base.layers {
            let h = hyb.layer(&l.name).unwrap();
            assert_eq!(h.kind, l.kind);
            if l.name != "conv8" {
                assert_eq!(h.inputs, l.inputs);
            }
        }
    }

    #[test]
    fn nrenet_widths_increase() {
        let spec = build_nrenet(DESK_SCALE, 8).unwrap();
        let widths: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Group { hidden, .. } => Some(hidden.0),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![16, 32, 64]);
        assert_eq!(spec.channels("conv1").unwrap(), 8);
        let shapes = spec.infer_shapes(49, 50).unwrap();
        let last = shapes.last().unwrap();
        assert_eq!((last.height, last.width), (49, 50));
        assert_eq!(spec.receptive_field(), None);
    }

    #[test]
    fn fcn_receptive_field_is_finite() {
        let spec = build_baseline_fcn(DESK_SCALE, 4).unwrap();
        let rf = spec.receptive_field().unwrap();
        assert!(rf > 400 && rf < 450, "{rf}");
    }

    #[test]
    fn irnn_widths_match_lstm_budget() {
        let (d1, d2) = irnn_matched_widths(64, (8, 8));
        let lstm = 2 * CellKind::Lstm.param_count(64, 8) + 2 * CellKind::Lstm.param_count(16, 8);
        let irnn = 2 * CellKind::Irnn.param_count(64, d1) + 2 * CellKind::Irnn.param_count(2 * d1, d2);
        assert!((irnn as f64 - lstm as f64).abs() / (lstm as f64) < 0.05, "{lstm} vs {irnn}");
    }
}
