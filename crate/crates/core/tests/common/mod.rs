//! Naive sequential oracles shared by the integration tests and the
//! acceptance suite. Everything here is written for clarity, not speed, and
//! shares no code with the library kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use renet_seg::renet::{CellParams, Direction, ReNetLayer};
use renet_seg::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn at4(t: &Tensor<f64>, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

/// Direct convolution over `[N,C,H,W]`, zero padding `pad` on every side.
pub fn conv2d_naive(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ext = dilation * (k - 1) + 1;
    let ho = (h + 2 * pad - ext) / stride + 1;
    let wo = (wd + 2 * pad - ext) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for bi in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u * dilation) as isize - pad as isize;
                                let xx = (j * stride + v * dilation) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((oc * c + ic) * k + u) * k + v] * at4(x, bi, ic, y as usize, xx as usize);
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, ho, wo], out).unwrap()
}

/// Max pooling with windows starting at `i*s - (k-s)/2`; positions outside
/// the map are not candidates.
pub fn maxpool_naive(x: &Tensor<f64>, k: usize, s: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let pad = k.saturating_sub(s) / 2;
    let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for bi in 0..n {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i * s + u) as isize - pad as isize;
                            let xx = (j * s + v) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                best = best.max(at4(x, bi, ch, y as usize, xx as usize));
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out).unwrap()
}

/// Half-pixel-centred bilinear interpolation evaluated pointwise.
pub fn upsample_naive(x: &Tensor<f64>, factor: usize, target: (usize, usize)) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let coord = |i: usize, len: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0).min((len - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(len - 1), s - lo as f64)
    };
    let mut out = Vec::new();
    for bi in 0..n {
        for ch in 0..c {
            for i in 0..target.0 {
                let (y0, y1, fy) = coord(i, h);
                for j in 0..target.1 {
                    let (x0, x1, fx) = coord(j, w);
                    let top = at4(x, bi, ch, y0, x0) * (1.0 - fx) + at4(x, bi, ch, y0, x1) * fx;
                    let bot = at4(x, bi, ch, y1, x0) * (1.0 - fx) + at4(x, bi, ch, y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, target.0, target.1], out).unwrap()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn affine(w: &Tensor<f64>, x: &[f64], u: &Tensor<f64>, h: &[f64], b: &Tensor<f64>, row: usize) -> f64 {
    let (p, d) = (x.len(), h.len());
    let mut acc = b.data()[row];
    for k in 0..p {
        acc += w.data()[row * p + k] * x[k];
    }
    for k in 0..d {
        acc += u.data()[row * d + k] * h[k];
    }
    acc
}

/// Runs one recurrence over a sequence of inputs from a zero state.
pub fn recurrence_naive(cell: &CellParams<f64>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = cell.hidden();
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut out = Vec::new();
    for x in xs {
        let mut nh = vec![0.0; d];
        match cell {
            CellParams::Lstm(p) => {
                for r in 0..d {
                    let i = sigmoid(affine(&p.w[0], x, &p.u[0], &h, &p.b[0], r));
                    let f = sigmoid(affine(&p.w[1], x, &p.u[1], &h, &p.b[1], r));
                    let g = affine(&p.w[2], x, &p.u[2], &h, &p.b[2], r).tanh();
                    let o = sigmoid(affine(&p.w[3], x, &p.u[3], &h, &p.b[3], r));
                    c[r] = f * c[r] + i * g;
                    nh[r] = o * c[r].tanh();
                }
            }
            CellParams::Irnn(p) => {
                for r in 0..d {
                    nh[r] = affine(&p.w, x, &p.u, &h, &p.b, r).max(0.0);
                }
            }
        }
        h = nh;
        out.push(h.clone());
    }
    out
}

/// Bidirectional sweep over `[N,h,w,p]`: forward hidden states first, then
/// the reverse pass, per cell.
pub fn sweep_naive(grid: &Tensor<f64>, layer: &ReNetLayer<f64>) -> Tensor<f64> {
    let (n, h, w, p) = (grid.shape()[0], grid.shape()[1], grid.shape()[2], grid.shape()[3]);
    let d = layer.forward.hidden();
    let cell = |b: usize, y: usize, x: usize| grid.data()[((b * h + y) * w + x) * p..((b * h + y) * w + x + 1) * p].to_vec();
    let mut out = vec![0.0; n * h * w * 2 * d];
    let mut put = |b: usize, y: usize, x: usize, off: usize, v: &[f64]| {
        let base = ((b * h + y) * w + x) * 2 * d + off;
        out[base..base + d].copy_from_slice(v);
    };
    for b in 0..n {
        let lanes: Vec<Vec<(usize, usize)>> = match layer.direction {
            Direction::Vertical => (0..w).map(|x| (0..h).map(|y| (y, x)).collect()).collect(),
            Direction::Horizontal => (0..h).map(|y| (0..w).map(|x| (y, x)).collect()).collect(),
        };
        for lane in lanes {
            let xs: Vec<Vec<f64>> = lane.iter().map(|&(y, x)| cell(b, y, x)).collect();
            let fwd = recurrence_naive(&layer.forward, &xs);
            let rev_xs: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
            let bwd = recurrence_naive(&layer.backward, &rev_xs);
            for (s, &(y, x)) in lane.iter().enumerate() {
                put(b, y, x, 0, &fwd[s]);
                put(b, y, x, d, &bwd[lane.len() - 1 - s]);
            }
        }
    }
    Tensor::from_vec(&[n, h, w, 2 * d], out).unwrap()
}

/// Dense mean field written straight from the update rule:
/// `Q_i(l) ∝ exp(-U_i(l) - sum_{j != i} k(i,j) sum_{l' != l} Q_j(l'))`
/// with the two-Gaussian kernel and colors on a 0..255 scale.
#[allow(clippy::too_many_arguments)]
pub fn mean_field_naive(
    probs: &Tensor<f64>,
    image: &Tensor<f64>,
    w1: f64,
    w2: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    iterations: usize,
) -> Tensor<f64> {
    let (l, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let n = h * w;
    let p = |q: &Vec<f64>, lab: usize, i: usize| q[lab * n + i];
    let color = |i: usize, k: usize| image.data()[k * n + i] * 255.0;
    let mut q = probs.data().to_vec();
    for _ in 0..iterations {
        let mut next = vec![0.0; l * n];
        for i in 0..n {
            let mut energies = Vec::with_capacity(l);
            for lab in 0..l {
                let mut pair = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dy = (i / w) as f64 - (j / w) as f64;
                    let dx = (i % w) as f64 - (j % w) as f64;
                    let pos = dy * dy + dx * dx;
                    let col: f64 = (0..3).map(|k| (color(i, k) - color(j, k)).powi(2)).sum();
                    let k = w1 * (-pos / (2.0 * alpha * alpha) - col / (2.0 * beta * beta)).exp()
                        + w2 * (-pos / (2.0 * gamma * gamma)).exp();
                    for other in 0..l {
                        if other != lab {
                            pair += k * p(&q, other, j);
                        }
                    }
                }
                energies.push(-p(&probs.data().to_vec(), lab, i).ln() + pair);
            }
            let z: f64 = energies.iter().map(|e| (-e).exp()).sum();
            for lab in 0..l {
                next[lab * n + i] = (-energies[lab]).exp() / z;
            }
        }
        q = next;
    }
    Tensor::from_vec(&[l, h, w], q).unwrap()
}

/// Metrics computed pixel by pixel with no confusion matrix.
#[derive(Debug, PartialEq)]
pub struct NaiveMetrics {
    pub pixel_accuracy: f64,
    pub class_accuracy: f64,
    pub mean_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn metrics_naive(pairs: &[(Vec<u8>, Vec<u8>)], classes: usize, ignore: u8) -> NaiveMetrics {
    let (mut correct, mut total) = (0u64, 0u64);
    let mut per_class_iou = Vec::new();
    let mut recalls = Vec::new();
    for c in 0..classes as u8 {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (gt, pred) in pairs {
            for (&g, &p) in gt.iter().zip(pred) {
                if g == ignore {
                    continue;
                }
                if g == c && p == c {
                    tp += 1;
                } else if p == c {
                    fp += 1;
                } else if g == c {
                    fneg += 1;
                }
            }
        }
        let union = tp + fp + fneg;
        per_class_iou.push(if union == 0 { None } else { Some(tp as f64 / union as f64) });
        if tp + fneg > 0 {
            recalls.push(tp as f64 / (tp + fneg) as f64);
        }
    }
    for (gt, pred) in pairs {
        for (&g, &p) in gt.iter().zip(pred) {
            if g != ignore {
                total += 1;
                correct += (g == p) as u64;
            }
        }
    }
    let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    NaiveMetrics {
        pixel_accuracy: correct as f64 / total as f64,
        class_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        mean_iou: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class_iou,
    }
}

/// Largest absolute elementwise difference.
pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
