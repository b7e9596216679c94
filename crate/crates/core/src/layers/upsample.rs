use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interpolation taps for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

/// Output sample `i` reads input coordinate `(i + 0.5) / factor - 0.5`,
/// clamped to `[0, n - 1]`.
fn taps(n_in: usize, n_out: usize, factor: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            Tap { lo, hi, w_hi: src - lo as f64 }
        })
        .collect()
}

fn check(factor: usize, h: usize, w: usize, target: (usize, usize)) -> Result<()> {
    if factor < 1 {
        return Err(Error::arg("upsampling factor must be >= 1"));
    }
    if target.0 == 0 || target.1 == 0 || target.0 > h * factor || target.1 > w * factor {
        return Err(Error::shape(format!(
            "upsample target {target:?} outside 1..={}x{}",
            h * factor,
            w * factor
        )));
    }
    Ok(())
}

/// Bilinear upsampling by an integer factor to exactly `factor * (h, w)`.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.nchw()?;
    bilinear_upsample_to(x, factor, (h * factor.max(1), w * factor.max(1)))
}

/// Same sample grid as [`bilinear_upsample`], evaluated only for the first
/// `target` rows and columns. Used to crop back to an input size that was not
/// a multiple of the network stride.
pub fn bilinear_upsample_to<T: Scalar>(x: &Tensor<T>, factor: usize, target: (usize, usize)) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    check(factor, h, w, target)?;
    let (ho, wo) = target;
    let rows = taps(h, ho, factor);
    let cols = taps(w, wo, factor);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(p, y)| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for (i, rt) in rows.iter().enumerate() {
            let wr_hi = T::of(rt.w_hi);
            let wr_lo = T::one() - wr_hi;
            for (j, ct) in cols.iter().enumerate() {
                let wc_hi = T::of(ct.w_hi);
                let wc_lo = T::one() - wc_hi;
                let top = wc_lo * src[rt.lo * w + ct.lo] + wc_hi * src[rt.lo * w + ct.hi];
                let bot = wc_lo * src[rt.hi * w + ct.lo] + wc_hi * src[rt.hi * w + ct.hi];
                y[i * wo + j] = wr_lo * top + wr_hi * bot;
            }
        }
    });
    let shape = if x.rank() == 3 { vec![c, ho, wo] } else { vec![n, c, ho, wo] };
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`bilinear_upsample_to`].
pub fn bilinear_upsample_backward<T: Scalar>(x_shape: &[usize], factor: usize, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let rank = x_shape.len();
    let (h, w) = (x_shape[rank - 2], x_shape[rank - 1]);
    let (ho, wo) = (gy.shape()[gy.rank() - 2], gy.shape()[gy.rank() - 1]);
    check(factor, h, w, (ho, wo))?;
    let rows = taps(h, ho, factor);
    let cols = taps(w, wo, factor);
    let planes = x_shape.iter().product::<usize>() / (h * w);
    let gyd = gy.data();
    let mut gx = vec![T::zero(); planes * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(p, g)| {
        let src = &gyd[p * ho * wo..(p + 1) * ho * wo];
        for (i, rt) in rows.iter().enumerate() {
            let wr_hi = T::of(rt.w_hi);
            let wr_lo = T::one() - wr_hi;
            for (j, ct) in cols.iter().enumerate() {
                let wc_hi = T::of(ct.w_hi);
                let wc_lo = T::one() - wc_hi;
                let gv = src[i * wo + j];
                let top = wr_lo * gv;
                let bot = wr_hi * gv;
                g[rt.lo * w + ct.lo] += wc_lo * top;
                g[rt.lo * w + ct.hi] += wc_hi * top;
                g[rt.hi * w + ct.lo] += wc_lo * bot;
                g[rt.hi * w + ct.hi] += wc_hi * bot;
            }
        }
    });
    Ok(Tensor::from_parts(x_shape.to_vec(), gx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_eight_shape() {
        let x = Tensor::<f32>::zeros(&[2, 10, 10]).unwrap();
        assert_eq!(bilinear_upsample(&x, 8).unwrap().shape(), &[2, 80, 80]);
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::<f64>::full(&[1, 3, 4], 3.5).unwrap();
        for f in 1..6 {
            assert!(bilinear_upsample(&x, f).unwrap().data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
        }
    }

    #[test]
    fn ramp_is_monotone() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn factor_zero_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]).unwrap();
        assert!(matches!(bilinear_upsample(&x, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_is_adjoint() {
        // <U x, g> == <x, U^T g>
        let x = Tensor::<f64>::from_vec(&[1, 2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.25, -0.7]).unwrap();
        let y = bilinear_upsample_to(&x, 3, (5, 8)).unwrap();
        let g = y.map(|v| v * 0.37 + 0.11);
        let gx = bilinear_upsample_backward(x.shape(), 3, &g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
