use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Max-pooling window `(kernel size, stride)`.
///
/// Windows start at `i * stride - pad` with `pad = (kernel - stride) / 2`, so
/// `(3, 1)` keeps the resolution and `(2, 2)` halves it. Out-of-range samples
/// are skipped, which gives `ceil(H / stride)` outputs per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolConfig {
    pub fn new(kernel: usize, stride: usize) -> Self {
        PoolConfig { kernel, stride }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::config("pool kernel and stride must be >= 1"));
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        self.kernel.saturating_sub(self.stride) / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

/// Pooled map plus, for every output, the flat in-plane index of the input
/// element it copied (the first maximal element in window scan order).
pub fn maxpool<T: Scalar>(x: &Tensor<T>, cfg: &PoolConfig) -> Result<(Tensor<T>, Vec<u32>)> {
    cfg.validate()?;
    let (n, c, h, w) = x.nchw()?;
    let (ho, wo) = cfg.output_size(h, w);
    let pad = cfg.pad() as isize;
    let plane_in = h * w;
    let plane_out = ho * wo;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * plane_out];
    let mut arg = vec![0u32; n * c * plane_out];

    out.par_chunks_mut(plane_out)
        .zip(arg.par_chunks_mut(plane_out))
        .enumerate()
        .for_each(|(p, (y, a))| {
            let src = &xd[p * plane_in..(p + 1) * plane_in];
            for i in 0..ho {
                let r0 = (i * cfg.stride) as isize - pad;
                let rs = r0.max(0) as usize;
                let re = ((r0 + cfg.kernel as isize).min(h as isize)) as usize;
                for j in 0..wo {
                    let c0 = (j * cfg.stride) as isize - pad;
                    let cs = c0.max(0) as usize;
                    let ce = ((c0 + cfg.kernel as isize).min(w as isize)) as usize;
                    let mut best = src[rs * w + cs];
                    let mut best_at = rs * w + cs;
                    for r in rs..re {
                        for q in cs..ce {
                            let v = src[r * w + q];
                            if v > best {
                                best = v;
                                best_at = r * w + q;
                            }
                        }
                    }
                    y[i * wo + j] = best;
                    a[i * wo + j] = best_at as u32;
                }
            }
        });

    let shape = if x.rank() == 3 { vec![c, ho, wo] } else { vec![n, c, ho, wo] };
    Ok((Tensor::from_parts(shape, out), arg))
}

/// Routes each upstream gradient to the input element recorded in `argmax`.
pub fn maxpool_backward<T: Scalar>(x_shape: &[usize], argmax: &[u32], gy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x_shape[x_shape.len() - 2], x_shape[x_shape.len() - 1]);
    let plane_in = h * w;
    let planes = x_shape.iter().product::<usize>() / plane_in;
    let plane_out = gy.len() / planes;
    let gyd = gy.data();
    let mut gx = vec![T::zero(); planes * plane_in];
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(p, g)| {
        let gyp = &gyd[p * plane_out..(p + 1) * plane_out];
        let ap = &argmax[p * plane_out..(p + 1) * plane_out];
        for (&gv, &at) in gyp.iter().zip(ap) {
            g[at as usize] += gv;
        }
    });
    Tensor::from_parts(x_shape.to_vec(), gx)
}
