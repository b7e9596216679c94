//! Gateless ReLU recurrence `h = relu(W x + U h_prev + b)`.

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Scalar, Tensor};

use super::cell::Cell;

/// `W [d x p]`, `U [d x d]`, `b [d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IrnnParams<T> {
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> IrnnParams<T> {
    /// Zero input weights and bias, identity recurrence.
    pub fn identity(input_size: usize, hidden: usize) -> Result<Self> {
        let mut u = Tensor::zeros(&[hidden, hidden])?;
        for j in 0..hidden {
            u.data_mut()[j * hidden + j] = T::one();
        }
        Ok(IrnnParams {
            w: Tensor::zeros(&[hidden, input_size])?,
            u,
            b: Tensor::zeros(&[hidden])?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn input_size(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        let (d, p) = (self.hidden(), self.input_size());
        d * p + d * d + d
    }

    pub fn validate(&self) -> Result<()> {
        let (d, p) = (self.hidden(), self.input_size());
        if self.w.shape() != [d, p] || self.u.shape() != [d, d] || self.b.shape() != [d] {
            return Err(Error::shape(format!(
                "IRNN shapes W {:?}, U {:?}, b {:?} are inconsistent",
                self.w.shape(),
                self.u.shape(),
                self.b.shape()
            )));
        }
        if !(self.w.all_finite() && self.u.all_finite() && self.b.all_finite()) {
            return Err(Error::Numeric {
                message: "non-finite IRNN parameter".into(),
                checkpoint: None,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PackedIrnn<T> {
    pub p: usize,
    pub d: usize,
    /// `[p x d]`
    pub wt: Vec<T>,
    /// `[d x d]`
    pub ut: Vec<T>,
    pub b: Vec<T>,
}

fn transpose<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

impl<T: Scalar> PackedIrnn<T> {
    pub fn pack(params: &IrnnParams<T>) -> Result<Self> {
        params.validate()?;
        let (d, p) = (params.hidden(), params.input_size());
        Ok(PackedIrnn {
            p,
            d,
            wt: transpose(params.w.data(), d, p),
            ut: transpose(params.u.data(), d, d),
            b: params.b.data().to_vec(),
        })
    }

    pub fn unpack(&self, wt: &[T], ut: &[T], b: &[T]) -> IrnnParams<T> {
        let (d, p) = (self.d, self.p);
        IrnnParams {
            w: Tensor::from_parts(vec![d, p], transpose(wt, p, d)),
            u: Tensor::from_parts(vec![d, d], transpose(ut, d, d)),
            b: Tensor::from_parts(vec![d], b.to_vec()),
        }
    }

    /// Writes `[a | h]` into `trace`.
    #[inline]
    fn step_into(&self, x: &[T], h_prev: &[T], trace: &mut [T]) {
        let d = self.d;
        let (a, h) = trace.split_at_mut(d);
        a.copy_from_slice(&self.b);
        for (k, &xk) in x.iter().enumerate() {
            if xk != T::zero() {
                axpy(xk, &self.wt[k * d..(k + 1) * d], a);
            }
        }
        for (k, &hk) in h_prev.iter().enumerate() {
            if hk != T::zero() {
                axpy(hk, &self.ut[k * d..(k + 1) * d], a);
            }
        }
        for j in 0..d {
            h[j] = if a[j] > T::zero() { a[j] } else { T::zero() };
        }
    }
}

impl<T: Scalar> Cell<T> for PackedIrnn<T> {
    fn input_size(&self) -> usize {
        self.p
    }

    fn hidden(&self) -> usize {
        self.d
    }

    fn trace_width(&self) -> usize {
        2 * self.d
    }

    fn hidden_offset(&self) -> usize {
        self.d
    }

    fn grad_len(&self) -> usize {
        (self.p + self.d + 1) * self.d
    }

    fn forward_lane(&self, xs: &[&[T]], trace: &mut [T]) {
        let d = self.d;
        let zeros = vec![T::zero(); d];
        for (s, x) in xs.iter().enumerate() {
            let (done, cur) = trace.split_at_mut(s * 2 * d);
            let h_prev: &[T] = if s == 0 { &zeros } else { &done[(s - 1) * 2 * d + d..] };
            self.step_into(x, h_prev, &mut cur[..2 * d]);
        }
    }

    fn backward_lane(&self, xs: &[&[T]], trace: &[T], gh: &[T], grads: &mut [T], gxs: &mut [T]) {
        let (d, p) = (self.d, self.p);
        let (gwt, rest) = grads.split_at_mut(p * d);
        let (gut, gb) = rest.split_at_mut(d * d);
        let mut dh_next = vec![T::zero(); d];
        let mut da = vec![T::zero(); d];
        for s in (0..xs.len()).rev() {
            let a = &trace[s * 2 * d..s * 2 * d + d];
            for j in 0..d {
                let dh = gh[s * d + j] + dh_next[j];
                da[j] = if a[j] > T::zero() { dh } else { T::zero() };
            }
            for (acc, &v) in gb.iter_mut().zip(&da) {
                *acc += v;
            }
            for (k, &xk) in xs[s].iter().enumerate() {
                axpy(xk, &da, &mut gwt[k * d..(k + 1) * d]);
            }
            if s > 0 {
                let h_prev = &trace[(s - 1) * 2 * d + d..s * 2 * d];
                for (k, &hk) in h_prev.iter().enumerate() {
                    axpy(hk, &da, &mut gut[k * d..(k + 1) * d]);
                }
            }
            for (k, out) in gxs[s * p..(s + 1) * p].iter_mut().enumerate() {
                *out = dot(&self.wt[k * d..(k + 1) * d], &da);
            }
            for (k, out) in dh_next.iter_mut().enumerate() {
                *out = dot(&self.ut[k * d..(k + 1) * d], &da);
            }
        }
    }
}

/// One IRNN update.
pub fn irnn_step<T: Scalar>(x: &Tensor<T>, h_prev: &Tensor<T>, params: &IrnnParams<T>) -> Result<Tensor<T>> {
    let packed = PackedIrnn::pack(params)?;
    if x.len() != packed.p || h_prev.len() != packed.d {
        return Err(Error::shape(format!(
            "irnn_step: x has {} values (expected {}), h has {} (expected {})",
            x.len(),
            packed.p,
            h_prev.len(),
            packed.d
        )));
    }
    let mut trace = vec![T::zero(); 2 * packed.d];
    packed.step_into(x.data(), h_prev.data(), &mut trace);
    Ok(Tensor::from_parts(vec![packed.d], trace[packed.d..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_recurrence_holds_nonnegative_state() {
        let params = IrnnParams::<f64>::identity(3, 4).unwrap();
        let v = Tensor::from_vec(&[4], vec![0.0, 0.5, 2.0, 7.25]).unwrap();
        let mut h = v.clone();
        for t in 0..10 {
            let x = Tensor::from_vec(&[3], vec![t as f64, -1.0, 3.0]).unwrap();
            h = irnn_step(&x, &h, &params).unwrap();
            assert_eq!(h, v);
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let params = IrnnParams::<f64>::identity(2, 3).unwrap();
        let mut h = Tensor::zeros(&[3]).unwrap();
        for _ in 0..5 {
            h = irnn_step(&Tensor::full(&[2], 4.0).unwrap(), &h, &params).unwrap();
        }
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatch_rejected() {
        let params = IrnnParams::<f64>::identity(2, 3).unwrap();
        let h = Tensor::zeros(&[3]).unwrap();
        assert!(irnn_step(&Tensor::zeros(&[5]).unwrap(), &h, &params).is_err());
    }
}
