//! Dense row-major tensors.
//!
//! Everything downstream (feature maps, LSTM gate weights, probability maps)
//! is a [`Tensor`]. The element type is generic over [`Scalar`] so that the
//! same kernels run in single precision for training and in double precision
//! for gradient checks and oracle comparisons.

mod checkpoint;
mod scalar;

pub use checkpoint::{decode_tensor, encode_tensor, read_tensor_file, write_tensor_file, StoredTensor, MAGIC};
pub use scalar::Scalar;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!("extent {pos} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    /// A tensor of the given shape with every element equal to `fill`.
    pub fn full(shape: &[usize], fill: T) -> Result<Self> {
        let n = check_extents(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-1 tensor holding a single value; the shape of every loss node.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Internal constructor for shapes already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(shape.iter().all(|&e| e > 0));
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    /// Flat buffer offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index {index:?} has rank {}, tensor has rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            if i >= e {
                return Err(Error::shape(format!("index {index:?} outside shape {:?}", self.shape)));
            }
            off = off * e + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Reorders axes: output axis `k` is input axis `order[k]`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if order.len() != rank {
            return Err(Error::arg(format!("axis order {order:?} for rank {rank}")));
        }
        for &a in order {
            if a >= rank || seen[a] {
                return Err(Error::arg(format!("axis order {order:?} is not a permutation")));
            }
            seen[a] = true;
        }
        let src_strides = self.strides();
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let gather: Vec<usize> = order.iter().map(|&a| src_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.data.len() {
            let src: usize = idx.iter().zip(&gather).map(|(i, s)| i * s).sum();
            out.push(self.data[src]);
            for k in (0..rank).rev() {
                idx[k] += 1;
                if idx[k] < out_shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape("matmul expects rank-2 operands"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                axpy(a, &other.data[p * n..(p + 1) * n], row);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    /// Largest absolute elementwise difference, in double precision.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Treats rank-3 `[C,H,W]` as a batch of one; returns `(N, C, H, W)`.
    pub(crate) fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((1, c, h, w)),
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a [C,H,W] or [N,C,H,W] map, got {:?}",
                self.shape
            ))),
        }
    }
}

/// `y += a * x`, accumulating in index order.
#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// Stacks maps along the channel axis (axis 0 for `[C,H,W]`, axis 1 for
/// `[N,C,H,W]`), in argument order.
pub fn concat_channels<T: Scalar>(maps: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::arg("concat_channels needs at least one map"))?;
    let rank = first.rank();
    let (n, _, h, w) = first.nchw()?;
    let mut total_c = 0;
    for m in maps {
        let (mn, mc, mh, mw) = m.nchw()?;
        if m.rank() != rank || mn != n || mh != h || mw != w {
            return Err(Error::shape(format!(
                "concat_channels: {:?} does not match {:?} outside the channel axis",
                m.shape(),
                first.shape()
            )));
        }
        total_c += mc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for m in maps {
            let c = m.nchw()?.1;
            data.extend_from_slice(&m.data[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let shape = if rank == 3 {
        vec![total_c, h, w]
    } else {
        vec![n, total_c, h, w]
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Inverse of [`concat_channels`]: slices a map into consecutive channel blocks.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = t.nchw()?;
    if sizes.iter().sum::<usize>() != c || sizes.iter().any(|&s| s == 0) {
        return Err(Error::shape(format!("cannot split {c} channels into {sizes:?}")));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * plane)).collect();
    for b in 0..n {
        let mut start = b * c * plane;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&t.data[start..start + s * plane]);
            start += s * plane;
        }
    }
    Ok(parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| {
            let shape = if t.rank() == 3 { vec![s, h, w] } else { vec![n, s, h, w] };
            Tensor::from_parts(shape, data)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn create_fills_every_element() {
        let t = Tensor::<f64>::full(&[2, 3], 0.0).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&v| v == 0.0));
        let ones = Tensor::<f64>::full(&[21, 30, 40], 1.0).unwrap();
        assert_eq!(ones.sum(), 25200.0);
    }

    #[test]
    fn create_rejects_zero_extent() {
        assert!(matches!(Tensor::<f32>::full(&[0, 3], 1.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor::<f32>::full(&[], 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 4.0, 0.25, 6.0]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);

        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&v).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_stacks_in_order() {
        let a = Tensor::<f64>::full(&[1, 2, 2], 1.5).unwrap();
        let b = Tensor::<f64>::full(&[1, 2, 2], -2.0).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert!(c.data()[..4].iter().all(|&v| v == 1.5));
        assert!(c.data()[4..].iter().all(|&v| v == -2.0));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);

        let parts = split_channels(&c, &[1, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_table_widths() {
        let p4 = Tensor::<f32>::zeros(&[512, 2, 2]).unwrap();
        let p5 = Tensor::<f32>::zeros(&[512, 2, 2]).unwrap();
        let c7 = Tensor::<f32>::zeros(&[1024, 2, 2]).unwrap();
        assert_eq!(concat_channels(&[&p4, &p5, &c7]).unwrap().shape()[0], 2048);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 2, 2]).unwrap();
        let b = Tensor::<f64>::zeros(&[1, 2, 3]).unwrap();
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn permute_transposes_and_validates() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let tt = t.permute(&[1, 0]).unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(t.get(&[i, j]).unwrap(), tt.get(&[j, i]).unwrap());
            }
        }
        let r3 = Tensor::<f64>::zeros(&[2, 2, 2]).unwrap();
        assert!(matches!(r3.permute(&[0, 0, 1]), Err(Error::Argument(_))));
    }

    fn inverse(order: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; order.len()];
        for (k, &a) in order.iter().enumerate() {
            inv[a] = k;
        }
        inv
    }

    proptest! {
        #[test]
        fn permute_round_trips(dims in proptest::collection::vec(1usize..4, 1..5), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (i as f64) * 0.5 + seed as f64).collect();
            let t = Tensor::from_vec(&dims, data).unwrap();
            let mut order: Vec<usize> = (0..dims.len()).collect();
            order.rotate_left((seed as usize) % dims.len());
            if dims.len() > 1 && seed % 2 == 0 {
                order.swap(0, dims.len() - 1);
            }
            let p = t.permute(&order).unwrap();
            let back = p.permute(&inverse(&order)).unwrap();
            prop_assert_eq!(&back, &t);
            let mut a = t.data().to_vec();
            let mut b = p.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
