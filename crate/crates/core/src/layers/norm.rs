//! Feature normalization used before multi-layer feature concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    /// Per-channel standardization over the `N x H x W` samples of a minibatch.
    Batch,
    /// Each `C x H x W` map scaled to L2 norm `lambda`.
    L2,
    None,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::Batch => "batch",
            NormMode::L2 => "l2",
            NormMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batch" | "bn" => Ok(NormMode::Batch),
            "l2" => Ok(NormMode::L2),
            "none" => Ok(NormMode::None),
            other => Err(Error::config(format!("unknown normalization mode {other:?}"))),
        }
    }
}

pub const DEFAULT_L2_SCALE: f64 = 1000.0;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub mode: NormMode,
    pub lambda: Option<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl NormConfig {
    pub fn new(mode: NormMode) -> Self {
        NormConfig {
            mode,
            lambda: (mode == NormMode::L2).then_some(DEFAULT_L2_SCALE),
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            NormMode::L2 => match self.lambda {
                Some(l) if l > 0.0 => Ok(()),
                Some(l) => Err(Error::config(format!("l2 scale must be positive, got {l}"))),
                None => Err(Error::config("l2 normalization needs a scale (lambda)")),
            },
            NormMode::Batch if self.eps <= 0.0 => Err(Error::config("batch-norm eps must be positive")),
            NormMode::Batch if !(0.0..1.0).contains(&self.momentum) => {
                Err(Error::config("batch-norm momentum must lie in [0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Running averages consulted in the eval phase.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]).expect("channels >= 1"),
            var: Tensor::full(&[channels], T::one()).expect("channels >= 1"),
        }
    }
}

/// What the backward pass needs from a batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    phase: Phase,
}

/// `y = gamma * (x - mu) / sqrt(var + eps) + beta`, per channel of `[N,C,H,W]`.
///
/// Training phase uses minibatch statistics (biased variance) and folds them
/// into `stats` with the configured momentum (unbiased variance); eval phase
/// reads `stats`.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    cfg: &NormConfig,
    phase: Phase,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.nchw()?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.shape() != [c] {
        return Err(Error::shape(format!("batch-norm parameters do not match {c} channels")));
    }
    let plane = h * w;
    let count = n * plane;
    if phase == Phase::Train && count < 2 {
        return Err(Error::shape(format!(
            "batch-norm training needs at least 2 samples per channel, got {count}"
        )));
    }
    let xd = x.data();
    let eps = T::of(cfg.eps);
    let mut normalized = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); c];
    let mom = T::of(cfg.momentum);
    for ch in 0..c {
        let (mu, var) = match phase {
            Phase::Train => {
                let mut s = T::zero();
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        s += v;
                    }
                }
                let mu = s / T::of(count as f64);
                let mut ss = T::zero();
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        ss += (v - mu) * (v - mu);
                    }
                }
                let var = ss / T::of(count as f64);
                let unbiased = ss / T::of((count - 1) as f64);
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = mom * *rm + (T::one() - mom) * mu;
                let rv = &mut stats.var.data_mut()[ch];
                *rv = mom * *rv + (T::one() - mom) * unbiased;
                (mu, var)
            }
            Phase::Eval => (stats.mean.data()[ch], stats.var.data()[ch]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for k in r {
                let xn = (xd[k] - mu) * is;
                normalized[k] = xn;
                out[k] = g * xn + bt;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        BatchNormCache {
            normalized,
            inv_std,
            phase,
        },
    ))
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    x_shape: &[usize],
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gy: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (n, c, h, w) = gy.nchw()?;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let g = gy.data();
    let xn = &cache.normalized;
    let mut gx = vec![T::zero(); g.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for b in 0..n {
            for k in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                sg += g[k];
                sgx += g[k] * xn[k];
            }
        }
        gbeta[ch] = sg;
        ggamma[ch] = sgx;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        for b in 0..n {
            for k in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                gx[k] = match cache.phase {
                    Phase::Train => scale * (g[k] - sg / count - xn[k] * sgx / count),
                    Phase::Eval => scale * g[k],
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_parts(x_shape.to_vec(), gx),
        gamma: Tensor::from_parts(vec![c], ggamma),
        beta: Tensor::from_parts(vec![c], gbeta),
    })
}

/// Below this L2 norm a map is treated as all-zero.
pub const L2_NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct L2Cache<T> {
    norms: Vec<T>,
    /// Per sample: the map was (near) zero and was passed through as zeros.
    pub degenerate: Vec<bool>,
}

/// `y = lambda * x / ||x||` with the norm taken over each whole `C x H x W`
/// map. Near-zero maps come out as zeros and are flagged in the cache.
pub fn l2_normalize_scale<T: Scalar>(x: &Tensor<T>, lambda: f64) -> Result<(Tensor<T>, L2Cache<T>)> {
    if lambda <= 0.0 {
        return Err(Error::config("l2 scale must be positive"));
    }
    let (n, c, h, w) = x.nchw()?;
    let len = c * h * w;
    let xd = x.data();
    let lam = T::of(lambda);
    let mut out = vec![T::zero(); xd.len()];
    let mut norms = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for b in 0..n {
        let s = &xd[b * len..(b + 1) * len];
        let norm = s.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        norms.push(norm);
        if norm.to_f64().unwrap_or(0.0) <= L2_NORM_GUARD {
            degenerate.push(true);
            log::warn!("l2 normalization of a near-zero map (norm {norm}); emitting zeros");
            continue;
        }
        degenerate.push(false);
        let k = lam / norm;
        for (o, &v) in out[b * len..(b + 1) * len].iter_mut().zip(s) {
            *o = k * v;
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), L2Cache { norms, degenerate }))
}

/// `gx = (lambda / ||x||) * (gy - xhat <xhat, gy>)` with `xhat = x / ||x||`.
pub fn l2_normalize_backward<T: Scalar>(x: &Tensor<T>, lambda: f64, cache: &L2Cache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    let len = c * h * w;
    let xd = x.data();
    let g = gy.data();
    let lam = T::of(lambda);
    let mut gx = vec![T::zero(); xd.len()];
    for b in 0..n {
        if cache.degenerate[b] {
            continue;
        }
        let norm = cache.norms[b];
        let xs = &xd[b * len..(b + 1) * len];
        let gs = &g[b * len..(b + 1) * len];
        let mut proj = T::zero();
        for (&xv, &gv) in xs.iter().zip(gs) {
            proj += xv * gv;
        }
        let proj = proj / (norm * norm);
        let k = lam / norm;
        for ((o, &xv), &gv) in gx[b * len..(b + 1) * len].iter_mut().zip(xs).zip(gs) {
            *o = k * (gv - xv * proj);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), gx))
}
