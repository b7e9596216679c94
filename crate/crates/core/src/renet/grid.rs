use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Grid extents `(ceil(H/s), ceil(W/t))`.
pub fn grid_dims(height: usize, width: usize, patch: (usize, usize)) -> (usize, usize) {
    (height.div_ceil(patch.0), width.div_ceil(patch.1))
}

fn check_patch(patch: (usize, usize)) -> Result<()> {
    if patch.0 == 0 || patch.1 == 0 {
        return Err(Error::arg(format!("patch size {patch:?} must be at least 1x1")));
    }
    Ok(())
}

/// Splits `[C,H,W]` (or `[N,C,H,W]`) into non-overlapping `s x t` patches and
/// flattens each into a vector of `C*s*t` values, channel-major, then patch
/// row, then patch column. Border patches that run past the map read zeros.
pub fn patch_grid<T: Scalar>(map: &Tensor<T>, s: usize, t: usize) -> Result<Tensor<T>> {
    check_patch((s, t))?;
    let (n, c, hh, ww) = map.nchw()?;
    let (h, w) = grid_dims(hh, ww, (s, t));
    let p = c * s * t;
    let src = map.data();
    let mut out = vec![T::zero(); n * h * w * p];
    out.par_chunks_mut(w * p).enumerate().for_each(|(row, dst)| {
        let (b, gy) = (row / h, row % h);
        let base = b * c * hh * ww;
        for gx in 0..w {
            let cell = &mut dst[gx * p..(gx + 1) * p];
            for ch in 0..c {
                for u in 0..s {
                    let y = gy * s + u;
                    if y >= hh {
                        break;
                    }
                    for v in 0..t {
                        let x = gx * t + v;
                        if x >= ww {
                            break;
                        }
                        cell[(ch * s + u) * t + v] = src[base + (ch * hh + y) * ww + x];
                    }
                }
            }
        }
    });
    let shape = if map.rank() == 3 { vec![h, w, p] } else { vec![n, h, w, p] };
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`patch_grid`]: gathers grid gradients back onto the map; the
/// zero-filled border positions are dropped.
pub fn patch_grid_backward<T: Scalar>(map_shape: &[usize], s: usize, t: usize, g: &Tensor<T>) -> Result<Tensor<T>> {
    check_patch((s, t))?;
    let rank = map_shape.len();
    let (n, c, hh, ww) = match rank {
        3 => (1, map_shape[0], map_shape[1], map_shape[2]),
        4 => (map_shape[0], map_shape[1], map_shape[2], map_shape[3]),
        _ => return Err(Error::shape(format!("expected a rank 3 or 4 map shape, got {map_shape:?}"))),
    };
    let (h, w) = grid_dims(hh, ww, (s, t));
    let p = c * s * t;
    if g.len() != n * h * w * p {
        return Err(Error::shape(format!(
            "grid gradient {:?} does not match map {map_shape:?} with {s}x{t} patches",
            g.shape()
        )));
    }
    let gd = g.data();
    let mut out = vec![T::zero(); n * c * hh * ww];
    out.par_chunks_mut(hh * ww).enumerate().for_each(|(plane, dst)| {
        let (b, ch) = (plane / c, plane % c);
        for y in 0..hh {
            let (gy, u) = (y / s, y % s);
            for x in 0..ww {
                let (gx, v) = (x / t, x % t);
                dst[y * ww + x] = gd[((b * h + gy) * w + gx) * p + (ch * s + u) * t + v];
            }
        }
    });
    Ok(Tensor::from_parts(map_shape.to_vec(), out))
}

/// `[N,h,w,c]` grid to channel-first `[N,c,h,w]` (rank 3 likewise).
pub fn grid_to_map<T: Scalar>(grid: &Tensor<T>) -> Result<Tensor<T>> {
    match grid.rank() {
        3 => grid.permute(&[2, 0, 1]),
        4 => grid.permute(&[0, 3, 1, 2]),
        r => Err(Error::shape(format!("grid must have rank 3 or 4, got {r}"))),
    }
}

/// Inverse of [`grid_to_map`].
pub fn map_to_grid<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    match map.rank() {
        3 => map.permute(&[1, 2, 0]),
        4 => map.permute(&[0, 2, 3, 1]),
        r => Err(Error::shape(format!("map must have rank 3 or 4, got {r}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_dims() {
        assert_eq!(grid_dims(240, 320, (2, 2)), (120, 160));
        assert_eq!(grid_dims(5, 4, (2, 2)), (3, 2));
    }

    #[test]
    fn unit_patch_is_channel_last_reshape() {
        let map = Tensor::<f64>::from_vec(&[2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let g = patch_grid(&map, 1, 1).unwrap();
        assert_eq!(g.shape(), &[2, 3, 2]);
        assert_eq!(g, map.permute(&[1, 2, 0]).unwrap());
    }

    #[test]
    fn partial_rows_read_zero() {
        // 1 channel, H=5, W=2, 2x2 patches -> 3x1 grid; row 3 has one real pixel row
        let map = Tensor::<f64>::from_vec(&[1, 5, 2], (1..=10).map(f64::from).collect()).unwrap();
        let g = patch_grid(&map, 2, 2).unwrap();
        assert_eq!(g.shape(), &[3, 1, 4]);
        assert_eq!(&g.data()[0..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&g.data()[8..12], &[9.0, 10.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_major_flattening() {
        let map = Tensor::<f64>::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        let g = patch_grid(&map, 2, 2).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let map = Tensor::<f64>::from_vec(&[2, 2, 5, 3], (0..60).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let grid = patch_grid(&map, 2, 2).unwrap();
        let g = grid.map(|v| v * 1.3 - 0.2);
        let back = patch_grid_backward(map.shape(), 2, 2, &g).unwrap();
        let lhs: f64 = grid.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = map.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
