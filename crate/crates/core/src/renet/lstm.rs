//! The 1D LSTM unit that each directional sweep runs along its lanes.
//!
//! ```text
//! i = sigmoid(W_i x + U_i h + b_i)      f = sigmoid(W_f x + U_f h + b_f)
//! g = tanh(W_c x + U_c h + b_c)         o = sigmoid(W_o x + U_o h + b_o)
//! C = f * C_prev + i * g                h = o * tanh(C)
//! ```

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Scalar, Tensor};

use super::cell::Cell;

/// Gate order used for parameter storage, packing and checkpoint names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gate {
    Input,
    Forget,
    CellInput,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::CellInput, Gate::Output];

    /// Short name used in parameter manifests (`i`, `f`, `c`, `o`).
    pub fn tag(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::CellInput => "c",
            Gate::Output => "o",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per gate: input weights `W [d x p]`, recurrent weights `U [d x d]`, bias `b [d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub w: [Tensor<T>; 4],
    pub u: [Tensor<T>; 4],
    pub b: [Tensor<T>; 4],
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(input_size: usize, hidden: usize) -> Result<Self> {
        let w = Tensor::zeros(&[hidden, input_size])?;
        let u = Tensor::zeros(&[hidden, hidden])?;
        let b = Tensor::zeros(&[hidden])?;
        Ok(LstmParams {
            w: [w.clone(), w.clone(), w.clone(), w],
            u: [u.clone(), u.clone(), u.clone(), u],
            b: [b.clone(), b.clone(), b.clone(), b],
        })
    }

    pub fn hidden(&self) -> usize {
        self.w[0].shape()[0]
    }

    pub fn input_size(&self) -> usize {
        self.w[0].shape()[1]
    }

    pub fn param_count(&self) -> usize {
        let (d, p) = (self.hidden(), self.input_size());
        4 * (d * p + d * d + d)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, p) = (self.hidden(), self.input_size());
        for g in 0..4 {
            if self.w[g].shape() != [d, p] || self.u[g].shape() != [d, d] || self.b[g].shape() != [d] {
                return Err(Error::shape(format!(
                    "LSTM gate {} has inconsistent shapes (W {:?}, U {:?}, b {:?}) for d={d}, p={p}",
                    Gate::ALL[g].tag(),
                    self.w[g].shape(),
                    self.u[g].shape(),
                    self.b[g].shape()
                )));
            }
        }
        let finite = self.w.iter().chain(&self.u).chain(&self.b).all(Tensor::all_finite);
        if !finite {
            return Err(Error::Numeric {
                message: "non-finite LSTM parameter".into(),
                checkpoint: None,
            });
        }
        Ok(())
    }
}

/// Hidden state and cell memory of one LSTM position.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Result<Self> {
        Ok(LstmState {
            h: Tensor::zeros(&[hidden])?,
            c: Tensor::zeros(&[hidden])?,
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Gate weights rearranged for the sweep kernels: `wt[k]` holds column `k` of
/// all four `W` blocks side by side, so a pre-activation is a bias copy plus
/// one axpy per input element.
#[derive(Clone, Debug)]
pub(crate) struct PackedLstm<T> {
    pub p: usize,
    pub d: usize,
    /// `[p x 4d]`
    pub wt: Vec<T>,
    /// `[d x 4d]`
    pub ut: Vec<T>,
    /// `[4d]`
    pub b: Vec<T>,
}

impl<T: Scalar> PackedLstm<T> {
    pub fn pack(params: &LstmParams<T>) -> Result<Self> {
        params.validate()?;
        let (d, p) = (params.hidden(), params.input_size());
        let g4 = 4 * d;
        let mut wt = vec![T::zero(); p * g4];
        let mut ut = vec![T::zero(); d * g4];
        let mut b = vec![T::zero(); g4];
        for g in 0..4 {
            let w = params.w[g].data();
            let u = params.u[g].data();
            for j in 0..d {
                for k in 0..p {
                    wt[k * g4 + g * d + j] = w[j * p + k];
                }
                for k in 0..d {
                    ut[k * g4 + g * d + j] = u[j * d + k];
                }
                b[g * d + j] = params.b[g].data()[j];
            }
        }
        Ok(PackedLstm { p, d, wt, ut, b })
    }

    pub fn unpack(&self, wt: &[T], ut: &[T], b: &[T]) -> LstmParams<T> {
        let (d, p) = (self.d, self.p);
        let g4 = 4 * d;
        let gate = |g: usize| {
            let mut w = vec![T::zero(); d * p];
            let mut u = vec![T::zero(); d * d];
            let mut bb = vec![T::zero(); d];
            for j in 0..d {
                for k in 0..p {
                    w[j * p + k] = wt[k * g4 + g * d + j];
                }
                for k in 0..d {
                    u[j * d + k] = ut[k * g4 + g * d + j];
                }
                bb[j] = b[g * d + j];
            }
            (
                Tensor::from_parts(vec![d, p], w),
                Tensor::from_parts(vec![d, d], u),
                Tensor::from_parts(vec![d], bb),
            )
        };
        let gates: Vec<_> = (0..4).map(gate).collect();
        LstmParams {
            w: std::array::from_fn(|g| gates[g].0.clone()),
            u: std::array::from_fn(|g| gates[g].1.clone()),
            b: std::array::from_fn(|g| gates[g].2.clone()),
        }
    }

    /// One step. `trace` receives `[i f g o | C | h]` (6d values).
    #[inline]
    pub fn step_into(&self, x: &[T], h_prev: &[T], c_prev: &[T], pre: &mut [T], trace: &mut [T]) {
        let d = self.d;
        let g4 = 4 * d;
        pre.copy_from_slice(&self.b);
        for (k, &xk) in x.iter().enumerate() {
            if xk != T::zero() {
                axpy(xk, &self.wt[k * g4..(k + 1) * g4], pre);
            }
        }
        for (k, &hk) in h_prev.iter().enumerate() {
            if hk != T::zero() {
                axpy(hk, &self.ut[k * g4..(k + 1) * g4], pre);
            }
        }
        let (gates, rest) = trace.split_at_mut(g4);
        let (c, h) = rest.split_at_mut(d);
        for j in 0..d {
            let i = sigmoid(pre[j]);
            let f = sigmoid(pre[d + j]);
            let g = pre[2 * d + j].tanh();
            let o = sigmoid(pre[3 * d + j]);
            gates[j] = i;
            gates[d + j] = f;
            gates[2 * d + j] = g;
            gates[3 * d + j] = o;
            c[j] = f * c_prev[j] + i * g;
            h[j] = o * c[j].tanh();
        }
    }
}

impl<T: Scalar> Cell<T> for PackedLstm<T> {
    fn input_size(&self) -> usize {
        self.p
    }

    fn hidden(&self) -> usize {
        self.d
    }

    fn trace_width(&self) -> usize {
        6 * self.d
    }

    fn hidden_offset(&self) -> usize {
        5 * self.d
    }

    fn grad_len(&self) -> usize {
        (self.p + self.d + 1) * 4 * self.d
    }

    fn forward_lane(&self, xs: &[&[T]], trace: &mut [T]) {
        let d = self.d;
        let tw = self.trace_width();
        let zeros = vec![T::zero(); d];
        let mut pre = vec![T::zero(); 4 * d];
        for (s, x) in xs.iter().enumerate() {
            let (done, cur) = trace.split_at_mut(s * tw);
            let (h_prev, c_prev): (&[T], &[T]) = if s == 0 {
                (&zeros, &zeros)
            } else {
                let prev = &done[(s - 1) * tw..];
                (&prev[5 * d..6 * d], &prev[4 * d..5 * d])
            };
            self.step_into(x, h_prev, c_prev, &mut pre, &mut cur[..tw]);
        }
    }

    fn backward_lane(&self, xs: &[&[T]], trace: &[T], gh: &[T], grads: &mut [T], gxs: &mut [T]) {
        let (d, p) = (self.d, self.p);
        let g4 = 4 * d;
        let tw = self.trace_width();
        let (gwt, rest) = grads.split_at_mut(p * g4);
        let (gut, gb) = rest.split_at_mut(d * g4);
        let mut dh_next = vec![T::zero(); d];
        let mut dc_next = vec![T::zero(); d];
        let mut da = vec![T::zero(); g4];
        let one = T::one();
        for s in (0..xs.len()).rev() {
            let tr = &trace[s * tw..(s + 1) * tw];
            let (i, f, g, o) = (&tr[..d], &tr[d..2 * d], &tr[2 * d..3 * d], &tr[3 * d..4 * d]);
            let c = &tr[4 * d..5 * d];
            let prev = (s > 0).then(|| &trace[(s - 1) * tw..s * tw]);
            for j in 0..d {
                let dh = gh[s * d + j] + dh_next[j];
                let tc = c[j].tanh();
                let d_o = dh * tc;
                let dc = dh * o[j] * (one - tc * tc) + dc_next[j];
                let c_prev = prev.map_or(T::zero(), |pv| pv[4 * d + j]);
                da[j] = dc * g[j] * i[j] * (one - i[j]);
                da[d + j] = dc * c_prev * f[j] * (one - f[j]);
                da[2 * d + j] = dc * i[j] * (one - g[j] * g[j]);
                da[3 * d + j] = d_o * o[j] * (one - o[j]);
                dc_next[j] = dc * f[j];
            }
            for (acc, &v) in gb.iter_mut().zip(&da) {
                *acc += v;
            }
            let x = xs[s];
            for (k, &xk) in x.iter().enumerate() {
                axpy(xk, &da, &mut gwt[k * g4..(k + 1) * g4]);
            }
            if let Some(pv) = prev {
                let h_prev = &pv[5 * d..6 * d];
                for (k, &hk) in h_prev.iter().enumerate() {
                    axpy(hk, &da, &mut gut[k * g4..(k + 1) * g4]);
                }
            }
            let gx = &mut gxs[s * p..(s + 1) * p];
            for (k, out) in gx.iter_mut().enumerate() {
                *out = dot(&self.wt[k * g4..(k + 1) * g4], &da);
            }
            for (k, out) in dh_next.iter_mut().enumerate() {
                *out = dot(&self.ut[k * g4..(k + 1) * g4], &da);
            }
        }
    }
}

/// One LSTM update from `prev` on input `x`.
pub fn lstm_step<T: Scalar>(x: &Tensor<T>, prev: &LstmState<T>, params: &LstmParams<T>) -> Result<LstmState<T>> {
    let packed = PackedLstm::pack(params)?;
    let d = packed.d;
    if x.len() != packed.p || prev.h.len() != d || prev.c.len() != d {
        return Err(Error::shape(format!(
            "lstm_step: x has {} values (expected {}), state has {}/{} (expected {d})",
            x.len(),
            packed.p,
            prev.h.len(),
            prev.c.len()
        )));
    }
    let mut pre = vec![T::zero(); 4 * d];
    let mut trace = vec![T::zero(); 6 * d];
    packed.step_into(x.data(), prev.h.data(), prev.c.data(), &mut pre, &mut trace);
    Ok(LstmState {
        h: Tensor::from_parts(vec![d], trace[5 * d..].to_vec()),
        c: Tensor::from_parts(vec![d], trace[4 * d..5 * d].to_vec()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(w: f64, u: f64, b: [f64; 4]) -> LstmParams<f64> {
        let mut p = LstmParams::zeros(1, 1).unwrap();
        for g in 0..4 {
            p.w[g] = Tensor::from_vec(&[1, 1], vec![w]).unwrap();
            p.u[g] = Tensor::from_vec(&[1, 1], vec![u]).unwrap();
            p.b[g] = Tensor::from_vec(&[1], vec![b[g]]).unwrap();
        }
        p
    }

    #[test]
    fn zero_params_give_zero_hidden() {
        let params = LstmParams::<f64>::zeros(3, 2).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.4, -2.0, 9.0]).unwrap();
        let s = lstm_step(&x, &LstmState::zeros(2).unwrap(), &params).unwrap();
        assert!(s.h.data().iter().all(|&v| v == 0.0));
        assert!(s.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_carry_memory() {
        let params = scalar_params(0.0, 0.0, [-20.0, 20.0, 0.0, 0.0]);
        let prev = LstmState {
            h: Tensor::from_vec(&[1], vec![0.3]).unwrap(),
            c: Tensor::from_vec(&[1], vec![0.8]).unwrap(),
        };
        let x = Tensor::from_vec(&[1], vec![5.0]).unwrap();
        let s = lstm_step(&x, &prev, &params).unwrap();
        assert!((s.c.data()[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn scalar_hand_evaluation() {
        let params = scalar_params(1.0, 1.0, [0.0; 4]);
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let s = lstm_step(&x, &LstmState::zeros(1).unwrap(), &params).unwrap();
        // i = f = o = sigmoid(1), g = tanh(1)
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((sig1 - 0.7311).abs() < 1e-4);
        let c = sig1 * 1f64.tanh();
        assert!((s.c.data()[0] - c).abs() < 1e-15);
        assert!((s.c.data()[0] - 0.5568).abs() < 1e-4);
        assert!((s.h.data()[0] - sig1 * c.tanh()).abs() < 1e-15);
        assert!((s.h.data()[0] - 0.3696).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let params = LstmParams::<f64>::zeros(3, 2).unwrap();
        let x = Tensor::zeros(&[4]).unwrap();
        assert!(matches!(
            lstm_step(&x, &LstmState::zeros(2).unwrap(), &params),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut params = LstmParams::<f64>::zeros(3, 2).unwrap();
        let mut v = 0.0;
        for g in 0..4 {
            for t in [&mut params.w[g], &mut params.u[g], &mut params.b[g]] {
                for x in t.data_mut() {
                    v += 0.125;
                    *x = v;
                }
            }
        }
        let packed = PackedLstm::pack(&params).unwrap();
        assert_eq!(packed.unpack(&packed.wt, &packed.ut, &packed.b), params);
    }
}
