use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `dilation * (k - 1) / 2`, which preserves H and W for
    /// stride-1 convolutions with odd `k`.
    Same,
    Explicit(usize),
}

/// `(kernel size, stride, dilation)` plus channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
}

impl ConvConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvConfig {
            kernel,
            stride: 1,
            dilation: 1,
            in_channels,
            out_channels,
            padding: Padding::Same,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::config(format!(
                "kernel, stride and dilation must be >= 1 (got {}, {}, {})",
                self.kernel, self.stride, self.dilation
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("convolution channel counts must be >= 1"));
        }
        if self.padding == Padding::Same && self.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "same-size padding needs an odd kernel, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Span of input samples touched by one kernel application.
    pub fn extent(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.dilation * (self.kernel - 1) / 2,
            Padding::Explicit(p) => p,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let pad = self.pad();
        let ext = self.extent();
        let out = |n: usize| -> Result<usize> {
            if n + 2 * pad < ext {
                return Err(Error::shape(format!(
                    "input extent {n} too small for kernel extent {ext} with padding {pad}"
                )));
            }
            Ok((n + 2 * pad - ext) / self.stride + 1)
        };
        Ok((out(h)?, out(w)?))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Output indices `j` in `[lo, hi)` whose source `j*stride + offset` lands in
/// `[0, n)`.
#[inline]
fn valid_range(out_len: usize, stride: usize, offset: isize, n: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi_excl = if (n as isize) - offset <= 0 {
        0
    } else {
        (((n as isize) - offset) + s - 1) / s
    };
    let lo = lo.max(0) as usize;
    let hi = (hi_excl.max(0) as usize).min(out_len);
    (lo.min(hi), hi)
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, cfg: &ConvConfig) -> Result<Geometry> {
    cfg.validate()?;
    let (n, c, h, w) = x.nchw()?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    if weight.shape() != cfg.weight_shape() {
        return Err(Error::shape(format!(
            "conv weight shape {:?}, expected {:?}",
            weight.shape(),
            cfg.weight_shape()
        )));
    }
    let (ho, wo) = cfg.output_size(h, w)?;
    Ok(Geometry {
        n,
        c,
        h,
        w,
        k: cfg.kernel,
        ho,
        wo,
    })
}

fn output_shape<T: Scalar>(x: &Tensor<T>, n: usize, k: usize, ho: usize, wo: usize) -> Vec<usize> {
    if x.rank() == 3 {
        vec![k, ho, wo]
    } else {
        vec![n, k, ho, wo]
    }
}

/// `y[o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * x[c, i*stride + u*dilation - pad, j*stride + v*dilation - pad]`
/// with out-of-range samples read as zero. Accepts `[C,H,W]` or `[N,C,H,W]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    let g = geometry(x, weight, cfg)?;
    if bias.shape() != [cfg.out_channels] {
        return Err(Error::shape(format!("conv bias shape {:?}", bias.shape())));
    }
    let (stride, dil, pad) = (cfg.stride, cfg.dilation, cfg.pad() as isize);
    let kout = cfg.out_channels;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![T::zero(); g.n * kout * plane_out];

    out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, y)| {
        let (b, o) = (idx / kout, idx % kout);
        y.iter_mut().for_each(|v| *v = bd[o]);
        for c in 0..g.c {
            let xc = &xd[(b * g.c + c) * plane_in..(b * g.c + c + 1) * plane_in];
            for u in 0..g.k {
                let row_off = (u * dil) as isize - pad;
                let (i0, i1) = valid_range(g.ho, stride, row_off, g.h);
                for v in 0..g.k {
                    let wv = wd[((o * g.c + c) * g.k + u) * g.k + v];
                    if wv == T::zero() {
                        continue;
                    }
                    let col_off = (v * dil) as isize - pad;
                    let (j0, j1) = valid_range(g.wo, stride, col_off, g.w);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in i0..i1 {
                        let r = (i * stride) as isize + row_off;
                        let src = &xc[r as usize * g.w..(r as usize + 1) * g.w];
                        let dst = &mut y[i * g.wo + j0..i * g.wo + j1];
                        if stride == 1 {
                            let s0 = (j0 as isize + col_off) as usize;
                            axpy(wv, &src[s0..s0 + (j1 - j0)], dst);
                        } else {
                            for (jj, d) in dst.iter_mut().enumerate() {
                                let col = ((j0 + jj) * stride) as isize + col_off;
                                *d += wv * src[col as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(output_shape(x, g.n, kout, g.ho, g.wo), out))
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient `gy`. The input
/// gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    cfg: &ConvConfig,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, weight, cfg)?;
    let kout = cfg.out_channels;
    if gy.len() != g.n * kout * g.ho * g.wo {
        return Err(Error::shape("conv upstream gradient has the wrong size"));
    }
    let (stride, dil, pad) = (cfg.stride, cfg.dilation, cfg.pad() as isize);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let xd = x.data();
    let wd = weight.data();
    let gyd = gy.data();

    let mut gb = vec![T::zero(); kout];
    for b in 0..g.n {
        for (o, acc) in gb.iter_mut().enumerate() {
            let plane = &gyd[(b * kout + o) * plane_out..(b * kout + o + 1) * plane_out];
            for &v in plane {
                *acc += v;
            }
        }
    }

    let per_o = g.c * g.k * g.k;
    let mut gw = vec![T::zero(); kout * per_o];
    gw.par_chunks_mut(per_o).enumerate().for_each(|(o, gwo)| {
        for b in 0..g.n {
            let gyo = &gyd[(b * kout + o) * plane_out..(b * kout + o + 1) * plane_out];
            for c in 0..g.c {
                let xc = &xd[(b * g.c + c) * plane_in..(b * g.c + c + 1) * plane_in];
                for u in 0..g.k {
                    let row_off = (u * dil) as isize - pad;
                    let (i0, i1) = valid_range(g.ho, stride, row_off, g.h);
                    for v in 0..g.k {
                        let col_off = (v * dil) as isize - pad;
                        let (j0, j1) = valid_range(g.wo, stride, col_off, g.w);
                        if j0 >= j1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for i in i0..i1 {
                            let r = (i * stride) as isize + row_off;
                            let src = &xc[r as usize * g.w..(r as usize + 1) * g.w];
                            let gyrow = &gyo[i * g.wo + j0..i * g.wo + j1];
                            if stride == 1 {
                                let s0 = (j0 as isize + col_off) as usize;
                                acc += dot(gyrow, &src[s0..s0 + (j1 - j0)]);
                            } else {
                                for (jj, &gv) in gyrow.iter().enumerate() {
                                    let col = ((j0 + jj) * stride) as isize + col_off;
                                    acc += gv * src[col as usize];
                                }
                            }
                        }
                        gwo[(c * g.k + u) * g.k + v] += acc;
                    }
                }
            }
        }
    });

    let input = if need_input {
        let mut gx = vec![T::zero(); g.n * g.c * plane_in];
        gx.par_chunks_mut(plane_in).enumerate().for_each(|(idx, gxc)| {
            let (b, c) = (idx / g.c, idx % g.c);
            for o in 0..kout {
                let gyo = &gyd[(b * kout + o) * plane_out..(b * kout + o + 1) * plane_out];
                for u in 0..g.k {
                    let row_off = (u * dil) as isize - pad;
                    let (i0, i1) = valid_range(g.ho, stride, row_off, g.h);
                    for v in 0..g.k {
                        let wv = wd[((o * g.c + c) * g.k + u) * g.k + v];
                        if wv == T::zero() {
                            continue;
                        }
                        let col_off = (v * dil) as isize - pad;
                        let (j0, j1) = valid_range(g.wo, stride, col_off, g.w);
                        if j0 >= j1 {
                            continue;
                        }
                        for i in i0..i1 {
                            let r = ((i * stride) as isize + row_off) as usize;
                            let gyrow = &gyo[i * g.wo + j0..i * g.wo + j1];
                            if stride == 1 {
                                let s0 = (j0 as isize + col_off) as usize;
                                let dst = &mut gxc[r * g.w + s0..r * g.w + s0 + (j1 - j0)];
                                axpy(wv, gyrow, dst);
                            } else {
                                for (jj, &gv) in gyrow.iter().enumerate() {
                                    let col = (((j0 + jj) * stride) as isize + col_off) as usize;
                                    gxc[r * g.w + col] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::from_parts(x.shape().to_vec(), gx))
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![kout], gb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, cfg: &ConvConfig) -> Tensor<f64> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = cfg.output_size(h, wd).unwrap();
        let pad = cfg.pad() as isize;
        let mut y = Tensor::zeros(&[cfg.out_channels, ho, wo]).unwrap();
        for o in 0..cfg.out_channels {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for u in 0..cfg.kernel {
                            for v in 0..cfg.kernel {
                                let r = (i * cfg.stride + u * cfg.dilation) as isize - pad;
                                let q = (j * cfg.stride + v * cfg.dilation) as isize - pad;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    acc += w.get(&[o, ci, u, v]).unwrap()
                                        * x.get(&[ci, r as usize, q as usize]).unwrap();
                                }
                            }
                        }
                    }
                    y.set(&[o, i, j], acc).unwrap();
                }
            }
        }
        y
    }

    #[test]
    fn identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5, 4], &mut rng);
        let cfg = ConvConfig::new(3, 3, 1);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]).unwrap();
        for c in 0..3 {
            w.set(&[c, c, 0, 0], 1.0).unwrap();
        }
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]).unwrap(), &cfg).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_extent() {
        let cfg = ConvConfig::new(1, 1, 3).with_dilation(12);
        assert_eq!(cfg.extent(), 25);
        assert_eq!(cfg.output_size(8, 8).unwrap(), (8, 8));
    }

    #[test]
    fn even_kernel_same_padding_rejected() {
        let cfg = ConvConfig::new(1, 1, 2);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]).unwrap();
        let cfg = ConvConfig::new(3, 1, 3);
        let w = Tensor::zeros(&cfg.weight_shape()).unwrap();
        assert!(matches!(conv2d(&x, &w, &Tensor::zeros(&[1]).unwrap(), &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 6, 6], &mut rng);
        let cfg = ConvConfig::new(1, 2, 3).with_dilation(2);
        let w = random(&cfg.weight_shape(), &mut rng);
        let b = random(&[2], &mut rng);
        let y = conv2d(&x, &w, &b, &cfg).unwrap();
        assert!(y.max_abs_diff(&naive(&x, &w, &b, &cfg)) < 1e-12);

        for (k, s, d, p) in [(3, 2, 1, Padding::Explicit(1)), (2, 1, 1, Padding::Explicit(0)), (3, 3, 2, Padding::Explicit(3))] {
            let cfg = ConvConfig::new(2, 3, k).with_stride(s).with_dilation(d).with_padding(p);
            let x = random(&[2, 7, 9], &mut rng);
            let w = random(&cfg.weight_shape(), &mut rng);
            let b = random(&[3], &mut rng);
            let y = conv2d(&x, &w, &b, &cfg).unwrap();
            assert!(y.max_abs_diff(&naive(&x, &w, &b, &cfg)) < 1e-12, "k={k} s={s} d={d}");
        }
    }

    #[test]
    fn batched_equals_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ConvConfig::new(2, 2, 3);
        let w = random(&cfg.weight_shape(), &mut rng);
        let b = random(&[2], &mut rng);
        let x0 = random(&[2, 4, 5], &mut rng);
        let x1 = random(&[2, 4, 5], &mut rng);
        let mut data = x0.data().to_vec();
        data.extend_from_slice(x1.data());
        let xb = Tensor::from_vec(&[2, 2, 4, 5], data).unwrap();
        let yb = conv2d(&xb, &w, &b, &cfg).unwrap();
        let y0 = conv2d(&x0, &w, &b, &cfg).unwrap();
        let y1 = conv2d(&x1, &w, &b, &cfg).unwrap();
        assert_eq!(&yb.data()[..y0.len()], y0.data());
        assert_eq!(&yb.data()[y0.len()..], y1.data());
    }
}
