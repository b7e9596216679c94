use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::cell::Cell;
use super::irnn::{IrnnParams, PackedIrnn};
use super::lstm::{LstmParams, PackedLstm};

/// Lanes handed to one task in the backward pass. Parameter gradients are
/// summed per chunk and the chunk partials reduced in chunk order, so the
/// result is the same however many workers run the chunks.
const LANE_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Lanes are grid columns, scanned top-down then bottom-up.
    Vertical,
    /// Lanes are grid rows, scanned left-right then right-left.
    Horizontal,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Vertical => "V",
            Direction::Horizontal => "H",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Lanes and the two directions run on the rayon pool.
    #[default]
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Lstm,
    Irnn,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Irnn => "irnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "irnn" => Ok(CellKind::Irnn),
            other => Err(Error::config(format!("unknown recurrent cell '{other}' (expected lstm or irnn)"))),
        }
    }

    /// Learned values per direction for input width `p` and hidden width `d`.
    pub fn param_count(self, p: usize, d: usize) -> usize {
        let per_gate = d * p + d * d + d;
        match self {
            CellKind::Lstm => 4 * per_gate,
            CellKind::Irnn => per_gate,
        }
    }
}

/// Parameters of one directional recurrence.
#[derive(Clone, Debug, PartialEq)]
pub enum CellParams<T> {
    Lstm(LstmParams<T>),
    Irnn(IrnnParams<T>),
}

impl<T: Scalar> CellParams<T> {
    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Lstm(_) => CellKind::Lstm,
            CellParams::Irnn(_) => CellKind::Irnn,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            CellParams::Lstm(p) => p.hidden(),
            CellParams::Irnn(p) => p.hidden(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            CellParams::Lstm(p) => p.input_size(),
            CellParams::Irnn(p) => p.input_size(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.kind().param_count(self.input_size(), self.hidden())
    }

    /// Tensors in a fixed order: per gate `W, U, b` for LSTM (gates `i f c o`),
    /// `W, U, b` for IRNN.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            CellParams::Lstm(p) => (0..4).flat_map(|g| [&p.w[g], &p.u[g], &p.b[g]]).collect(),
            CellParams::Irnn(p) => vec![&p.w, &p.u, &p.b],
        }
    }

    /// Rebuilds parameters from tensors in [`CellParams::tensors`] order.
    pub fn from_tensors(kind: CellKind, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let want = match kind {
            CellKind::Lstm => 12,
            CellKind::Irnn => 3,
        };
        if tensors.len() != want {
            return Err(Error::arg(format!(
                "{} cell needs {want} tensors, got {}",
                kind.name(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let params = match kind {
            CellKind::Lstm => {
                let mut ws = Vec::new();
                let mut us = Vec::new();
                let mut bs = Vec::new();
                for _ in 0..4 {
                    ws.push(it.next().unwrap());
                    us.push(it.next().unwrap());
                    bs.push(it.next().unwrap());
                }
                let arr = |v: Vec<Tensor<T>>| -> [Tensor<T>; 4] { v.try_into().expect("four gates") };
                let p = LstmParams {
                    w: arr(ws),
                    u: arr(us),
                    b: arr(bs),
                };
                if p.w[0].rank() != 2 {
                    return Err(Error::shape("LSTM input weights must be matrices"));
                }
                p.validate()?;
                CellParams::Lstm(p)
            }
            CellKind::Irnn => {
                let p = IrnnParams {
                    w: it.next().unwrap(),
                    u: it.next().unwrap(),
                    b: it.next().unwrap(),
                };
                if p.w.rank() != 2 {
                    return Err(Error::shape("IRNN input weights must be a matrix"));
                }
                p.validate()?;
                CellParams::Irnn(p)
            }
        };
        Ok(params)
    }

    fn pack(&self) -> Result<Packed<T>> {
        Ok(match self {
            CellParams::Lstm(p) => Packed::Lstm(PackedLstm::pack(p)?),
            CellParams::Irnn(p) => Packed::Irnn(PackedIrnn::pack(p)?),
        })
    }
}

/// One ReNet layer: two independent recurrences sweeping the same axis in
/// opposite orders. `patch` is the patch size used to form its input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ReNetLayer<T> {
    pub direction: Direction,
    pub patch: (usize, usize),
    pub forward: CellParams<T>,
    pub backward: CellParams<T>,
}

impl<T: Scalar> ReNetLayer<T> {
    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn input_size(&self) -> usize {
        self.forward.input_size()
    }

    pub fn output_channels(&self) -> usize {
        2 * self.hidden()
    }

    pub fn param_count(&self) -> usize {
        self.forward.param_count() + self.backward.param_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch.0 == 0 || self.patch.1 == 0 {
            return Err(Error::arg(format!("patch size {:?} must be at least 1x1", self.patch)));
        }
        if self.forward.kind() != self.backward.kind()
            || self.forward.hidden() != self.backward.hidden()
            || self.forward.input_size() != self.backward.input_size()
        {
            return Err(Error::shape(format!(
                "forward ({} p={} d={}) and backward ({} p={} d={}) recurrences disagree",
                self.forward.kind().name(),
                self.forward.input_size(),
                self.forward.hidden(),
                self.backward.kind().name(),
                self.backward.input_size(),
                self.backward.hidden()
            )));
        }
        Ok(())
    }
}

enum Packed<T> {
    Lstm(PackedLstm<T>),
    Irnn(PackedIrnn<T>),
}

impl<T: Scalar> Packed<T> {
    fn cell(&self) -> &dyn Cell<T> {
        match self {
            Packed::Lstm(c) => c,
            Packed::Irnn(c) => c,
        }
    }

    fn unpack(&self, grads: &[T]) -> CellParams<T> {
        match self {
            Packed::Lstm(c) => {
                let (p, g4) = (c.p, 4 * c.d);
                let (wt, rest) = grads.split_at(p * g4);
                let (ut, b) = rest.split_at(c.d * g4);
                CellParams::Lstm(c.unpack(wt, ut, b))
            }
            Packed::Irnn(c) => {
                let (wt, rest) = grads.split_at(c.p * c.d);
                let (ut, b) = rest.split_at(c.d * c.d);
                CellParams::Irnn(c.unpack(wt, ut, b))
            }
        }
    }
}

/// Lane geometry over a `[n, h, w, p]` grid stored row-major.
#[derive(Clone, Copy, Debug)]
struct Lanes {
    n: usize,
    h: usize,
    w: usize,
    direction: Direction,
}

impl Lanes {
    fn count(&self) -> usize {
        match self.direction {
            Direction::Vertical => self.n * self.w,
            Direction::Horizontal => self.n * self.h,
        }
    }

    fn len(&self) -> usize {
        match self.direction {
            Direction::Vertical => self.h,
            Direction::Horizontal => self.w,
        }
    }

    /// Cell index of step `s` on `lane`, processing order reversed for the
    /// backward recurrence.
    fn cell(&self, lane: usize, s: usize, reverse: bool) -> usize {
        let len = self.len();
        let pos = if reverse { len - 1 - s } else { s };
        match self.direction {
            Direction::Vertical => {
                let (b, x) = (lane / self.w, lane % self.w);
                (b * self.h + pos) * self.w + x
            }
            Direction::Horizontal => lane * self.w + pos,
        }
    }
}

fn grid_dims<T: Scalar>(grid: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let s = grid.shape();
    match s.len() {
        3 => Ok((1, s[0], s[1], s[2])),
        4 => Ok((s[0], s[1], s[2], s[3])),
        r => Err(Error::shape(format!("sweep input must be a [h,w,p] or [N,h,w,p] grid, got rank {r}"))),
    }
}

/// Recorded activations of both recurrences, one trace per lane.
#[derive(Clone, Debug)]
pub struct SweepTrace<T> {
    forward: Vec<Vec<T>>,
    backward: Vec<Vec<T>>,
}

impl<T: Scalar> SweepTrace<T> {
    /// Sign of every traced value, which for a ReLU recurrence fixes the
    /// branch taken at each step.
    pub(crate) fn signs(&self) -> impl Iterator<Item = u32> + '_ {
        self.forward
            .iter()
            .chain(&self.backward)
            .flatten()
            .map(|&v| (v > T::zero()) as u32)
    }
}

/// Gradients of one sweep.
#[derive(Clone, Debug)]
pub struct SweepGrads<T> {
    pub input: Tensor<T>,
    pub forward: CellParams<T>,
    pub backward: CellParams<T>,
}

fn run_lanes<T: Scalar>(cell: &dyn Cell<T>, grid: &[T], lanes: Lanes, reverse: bool, exec: Exec) -> Vec<Vec<T>> {
    let p = cell.input_size();
    let len = lanes.len();
    let tw = cell.trace_width();
    let one = |lane: usize| {
        let xs: Vec<&[T]> = (0..len)
            .map(|s| {
                let q = lanes.cell(lane, s, reverse);
                &grid[q * p..(q + 1) * p]
            })
            .collect();
        let mut trace = vec![T::zero(); len * tw];
        cell.forward_lane(&xs, &mut trace);
        trace
    };
    match exec {
        Exec::Sequential => (0..lanes.count()).map(one).collect(),
        Exec::Parallel => (0..lanes.count()).into_par_iter().map(one).collect(),
    }
}

fn scatter_hidden<T: Scalar>(cell: &dyn Cell<T>, traces: &[Vec<T>], lanes: Lanes, reverse: bool, offset: usize, out: &mut [T]) {
    let d = cell.hidden();
    let (tw, ho) = (cell.trace_width(), cell.hidden_offset());
    for (lane, trace) in traces.iter().enumerate() {
        for s in 0..lanes.len() {
            let q = lanes.cell(lane, s, reverse);
            out[q * 2 * d + offset..q * 2 * d + offset + d].copy_from_slice(&trace[s * tw + ho..s * tw + ho + d]);
        }
    }
}

fn check_layer<T: Scalar>(grid: &Tensor<T>, layer: &ReNetLayer<T>) -> Result<(usize, usize, usize, usize)> {
    layer.validate()?;
    let (n, h, w, p) = grid_dims(grid)?;
    if p != layer.input_size() {
        return Err(Error::shape(format!(
            "grid cells have {p} values but the layer expects {}",
            layer.input_size()
        )));
    }
    Ok((n, h, w, p))
}

/// Bidirectional sweep that also returns the activations needed by
/// [`renet_sweep_backward`].
pub fn renet_sweep_traced<T: Scalar>(grid: &Tensor<T>, layer: &ReNetLayer<T>, exec: Exec) -> Result<(Tensor<T>, SweepTrace<T>)> {
    let (n, h, w, _) = check_layer(grid, layer)?;
    let lanes = Lanes {
        n,
        h,
        w,
        direction: layer.direction,
    };
    let (pf, pb) = (layer.forward.pack()?, layer.backward.pack()?);
    let (cf, cb) = (pf.cell(), pb.cell());
    let data = grid.data();
    let (tf, tb) = match exec {
        Exec::Sequential => (run_lanes(cf, data, lanes, false, exec), run_lanes(cb, data, lanes, true, exec)),
        Exec::Parallel => rayon::join(
            || run_lanes(cf, data, lanes, false, exec),
            || run_lanes(cb, data, lanes, true, exec),
        ),
    };
    let d = layer.hidden();
    let mut out = vec![T::zero(); n * h * w * 2 * d];
    scatter_hidden(cf, &tf, lanes, false, 0, &mut out);
    scatter_hidden(cb, &tb, lanes, true, d, &mut out);
    let mut shape = grid.shape().to_vec();
    *shape.last_mut().unwrap() = 2 * d;
    Ok((
        Tensor::from_parts(shape, out),
        SweepTrace {
            forward: tf,
            backward: tb,
        },
    ))
}

/// Runs both recurrences of `layer` along every lane of `grid` and
/// concatenates their hidden states per cell: `[h,w,p] -> [h,w,2d]`.
pub fn renet_sweep<T: Scalar>(grid: &Tensor<T>, layer: &ReNetLayer<T>, exec: Exec) -> Result<Tensor<T>> {
    renet_sweep_traced(grid, layer, exec).map(|(out, _)| out)
}

/// [`renet_sweep`] restricted to IRNN layers.
pub fn irnn_sweep<T: Scalar>(grid: &Tensor<T>, layer: &ReNetLayer<T>, exec: Exec) -> Result<Tensor<T>> {
    if layer.forward.kind() != CellKind::Irnn {
        return Err(Error::arg("irnn_sweep needs IRNN parameters"));
    }
    renet_sweep(grid, layer, exec)
}

#[allow(clippy::too_many_arguments)]
fn backward_dir<T: Scalar>(
    cell: &dyn Cell<T>,
    grid: &[T],
    lanes: Lanes,
    reverse: bool,
    traces: &[Vec<T>],
    gy: &[T],
    offset: usize,
    exec: Exec,
) -> (Vec<T>, Vec<T>) {
    let (p, d) = (cell.input_size(), cell.hidden());
    let len = lanes.len();
    let chunk = |c: usize| {
        let mut grads = vec![T::zero(); cell.grad_len()];
        let lo = c * LANE_CHUNK;
        let hi = (lo + LANE_CHUNK).min(lanes.count());
        let mut gxs = Vec::with_capacity(hi - lo);
        for lane in lo..hi {
            let mut xs = Vec::with_capacity(len);
            let mut gh = vec![T::zero(); len * d];
            for s in 0..len {
                let q = lanes.cell(lane, s, reverse);
                xs.push(&grid[q * p..(q + 1) * p]);
                gh[s * d..(s + 1) * d].copy_from_slice(&gy[q * 2 * d + offset..q * 2 * d + offset + d]);
            }
            let mut gx = vec![T::zero(); len * p];
            cell.backward_lane(&xs, &traces[lane], &gh, &mut grads, &mut gx);
            gxs.push(gx);
        }
        (grads, gxs)
    };
    let chunks = lanes.count().div_ceil(LANE_CHUNK);
    let parts: Vec<(Vec<T>, Vec<Vec<T>>)> = match exec {
        Exec::Sequential => (0..chunks).map(chunk).collect(),
        Exec::Parallel => (0..chunks).into_par_iter().map(chunk).collect(),
    };
    let mut grads = vec![T::zero(); cell.grad_len()];
    let mut gx = vec![T::zero(); grid.len()];
    for (c, (g, gxs)) in parts.into_iter().enumerate() {
        for (acc, v) in grads.iter_mut().zip(g) {
            *acc += v;
        }
        for (k, lane_gx) in gxs.iter().enumerate() {
            let lane = c * LANE_CHUNK + k;
            for s in 0..len {
                let q = lanes.cell(lane, s, reverse);
                gx[q * p..(q + 1) * p].copy_from_slice(&lane_gx[s * p..(s + 1) * p]);
            }
        }
    }
    (grads, gx)
}

/// Backpropagation through time for both recurrences of a sweep.
pub fn renet_sweep_backward<T: Scalar>(
    grid: &Tensor<T>,
    layer: &ReNetLayer<T>,
    trace: &SweepTrace<T>,
    gy: &Tensor<T>,
    exec: Exec,
) -> Result<SweepGrads<T>> {
    let (n, h, w, _) = check_layer(grid, layer)?;
    let d = layer.hidden();
    if gy.len() != n * h * w * 2 * d {
        return Err(Error::shape(format!(
            "sweep output gradient {:?} does not match a {n}x{h}x{w}x{} output",
            gy.shape(),
            2 * d
        )));
    }
    let lanes = Lanes {
        n,
        h,
        w,
        direction: layer.direction,
    };
    if trace.forward.len() != lanes.count() || trace.backward.len() != lanes.count() {
        return Err(Error::State("sweep trace was recorded for a different grid".into()));
    }
    let (pf, pb) = (layer.forward.pack()?, layer.backward.pack()?);
    let (cf, cb) = (pf.cell(), pb.cell());
    let (data, g) = (grid.data(), gy.data());
    let ((gf, gxf), (gb, gxb)) = match exec {
        Exec::Sequential => (
            backward_dir(cf, data, lanes, false, &trace.forward, g, 0, exec),
            backward_dir(cb, data, lanes, true, &trace.backward, g, d, exec),
        ),
        Exec::Parallel => rayon::join(
            || backward_dir(cf, data, lanes, false, &trace.forward, g, 0, exec),
            || backward_dir(cb, data, lanes, true, &trace.backward, g, d, exec),
        ),
    };
    let mut gx = gxf;
    for (a, b) in gx.iter_mut().zip(gxb) {
        *a += b;
    }
    Ok(SweepGrads {
        input: Tensor::from_parts(grid.shape().to_vec(), gx),
        forward: pf.unpack(&gf),
        backward: pb.unpack(&gb),
    })
}
