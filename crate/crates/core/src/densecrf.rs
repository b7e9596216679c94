//! Fully connected CRF refinement by synchronous mean-field updates.
//!
//! Unary terms are `-ln p` from the network. The pairwise kernel between
//! every two pixels is an appearance term over position and color plus a
//! smoothness term over position alone, both Gaussian, with Potts
//! compatibility. Messages are summed densely, so the cost is quadratic in
//! the pixel count and inputs are capped at [`MAX_PIXELS`].
//!
//! Colors are compared on a 0..255 scale so the bandwidth defaults read in
//! the usual units; images themselves stay in `[0, 1]`.

use rayon::prelude::*;

use crate::config::KeyValues;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest `H * W` accepted by [`mean_field`].
pub const MAX_PIXELS: usize = 16384;

/// Per-pixel sums must be within this of one.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    /// Weight of the appearance (position + color) kernel.
    pub w1: f64,
    /// Weight of the smoothness (position only) kernel.
    pub w2: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w1: 4.0,
            w2: 3.0,
            theta_alpha: 10.0,
            theta_beta: 13.0,
            theta_gamma: 3.0,
            iterations: 2,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w1.is_finite() && self.w2.is_finite()) {
            return Err(Error::config("crf weights must be finite and non-negative"));
        }
        for (name, v) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("crf {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Reads `crf.w1`, `crf.w2`, `crf.theta_alpha`, `crf.theta_beta`,
    /// `crf.theta_gamma` and `crf.iterations`, defaulting missing keys.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = CrfParams::default();
        let p = CrfParams {
            w1: kv.parse_or("crf.w1", d.w1)?,
            w2: kv.parse_or("crf.w2", d.w2)?,
            theta_alpha: kv.parse_or("crf.theta_alpha", d.theta_alpha)?,
            theta_beta: kv.parse_or("crf.theta_beta", d.theta_beta)?,
            theta_gamma: kv.parse_or("crf.theta_gamma", d.theta_gamma)?,
            iterations: kv.parse_or("crf.iterations", d.iterations)?,
        };
        p.validate()?;
        Ok(p)
    }

    /// `k(i, j)` from squared position and color distances.
    fn kernel(&self, d2_pos: f64, d2_col: f64) -> f64 {
        let mut k = 0.0;
        if self.w1 != 0.0 {
            let a = 2.0 * self.theta_alpha * self.theta_alpha;
            let b = 2.0 * self.theta_beta * self.theta_beta;
            k += self.w1 * (-d2_pos / a - d2_col / b).exp();
        }
        if self.w2 != 0.0 {
            let g = 2.0 * self.theta_gamma * self.theta_gamma;
            k += self.w2 * (-d2_pos / g).exp();
        }
        k
    }
}

fn check_normalized(p: &[f64], labels: usize, plane: usize) -> Result<()> {
    for px in 0..plane {
        let mut s = 0.0;
        for l in 0..labels {
            let v = p[l * plane + px];
            if !(v >= 0.0) {
                return Err(Error::arg(format!("probability {v} at pixel {px} is negative or NaN")));
            }
            s += v;
        }
        if (s - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::arg(format!("pixel {px} probabilities sum to {s}, not 1")));
        }
    }
    Ok(())
}

/// Mean-field refinement of `probs` (`[L,H,W]`, normalized per pixel) given
/// the `[3,H,W]` image in `[0, 1]`.
pub fn mean_field<T: Scalar>(probs: &Tensor<T>, image: &Tensor<T>, params: &CrfParams) -> Result<Tensor<T>> {
    params.validate()?;
    let s = probs.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("probabilities must be [L,H,W], got {s:?}")));
    }
    let (labels, h, w) = (s[0], s[1], s[2]);
    if image.shape() != [3, h, w] {
        return Err(Error::shape(format!(
            "image {:?} does not match probabilities {h}x{w}",
            image.shape()
        )));
    }
    let n = h * w;
    if n > MAX_PIXELS {
        return Err(Error::arg(format!("{n} pixels exceed the dense CRF limit of {MAX_PIXELS}")));
    }
    let p: Vec<f64> = probs.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    check_normalized(&p, labels, n)?;
    if params.iterations == 0 {
        return Ok(probs.clone());
    }
    let unary: Vec<f64> = p.iter().map(|&v| -v.ln()).collect();
    let color: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let c = |k: usize| image.data()[k * n + i].to_f64().unwrap_or(0.0) * 255.0;
            [c(0), c(1), c(2)]
        })
        .collect();

    let mut q = p;
    for _ in 0..params.iterations {
        // Pixel-major copy so each message reads contiguous distributions.
        let qt: Vec<f64> = (0..n).flat_map(|i| (0..labels).map(move |l| (i, l))).map(|(i, l)| q[l * n + i]).collect();
        let next: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (yi, xi) = ((i / w) as f64, (i % w) as f64);
                let mut msg = vec![0.0; labels];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let (dy, dx) = ((j / w) as f64 - yi, (j % w) as f64 - xi);
                    let dc: f64 = (0..3).map(|k| (color[i][k] - color[j][k]).powi(2)).sum();
                    let k = params.kernel(dy * dy + dx * dx, dc);
                    for (m, &qj) in msg.iter_mut().zip(&qt[j * labels..(j + 1) * labels]) {
                        *m += k * qj;
                    }
                }
                // Potts: label l pays for the mass every other label receives.
                let total: f64 = msg.iter().sum();
                let energy: Vec<f64> = (0..labels).map(|l| unary[l * n + i] + (total - msg[l])).collect();
                let lo = energy.iter().copied().fold(f64::INFINITY, f64::min);
                let e: Vec<f64> = energy.iter().map(|&v| (lo - v).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect();
        for (i, dist) in next.into_iter().enumerate() {
            for (l, v) in dist.into_iter().enumerate() {
                q[l * n + i] = v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![labels, h, w], q.into_iter().map(T::of).collect()))
}

/// Per-pixel most probable label; ties go to the lower index.
pub fn argmax_labels<T: Scalar>(probs: &Tensor<T>) -> Result<LabelMap> {
    let s = probs.shape();
    if s.len() != 3 || s[0] == 0 || s[0] > 255 {
        return Err(Error::shape(format!("probabilities must be [L,H,W] with L <= 255, got {s:?}")));
    }
    let (labels, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let d = probs.data();
    let data = (0..plane)
        .map(|px| {
            let mut best = 0;
            for l in 1..labels {
                if d[l * plane + px] > d[best * plane + px] {
                    best = l;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(h: usize, w: usize, fg: &[(usize, usize, f64)]) -> Tensor<f64> {
        let n = h * w;
        let mut d = vec![0.0; 2 * n];
        for i in 0..n {
            d[i] = 0.9;
            d[n + i] = 0.1;
        }
        for &(y, x, c) in fg {
            d[y * w + x] = 1.0 - c;
            d[n + y * w + x] = c;
        }
        Tensor::from_vec(&[2, h, w], d).unwrap()
    }

    #[test]
    fn zero_iterations_is_identity() {
        let p = two_class(3, 4, &[(1, 1, 0.7)]);
        let img = Tensor::full(&[3, 3, 4], 0.2).unwrap();
        let params = CrfParams {
            iterations: 0,
            ..CrfParams::default()
        };
        assert_eq!(mean_field(&p, &img, &params).unwrap(), p);
    }

    #[test]
    fn outlier_is_absorbed() {
        let p = two_class(5, 5, &[(2, 2, 0.6)]);
        let img = Tensor::full(&[3, 5, 5], 0.5).unwrap();
        let params = CrfParams {
            w1: 0.0,
            w2: 1.0,
            theta_gamma: 2.0,
            ..CrfParams::default()
        };
        let q = mean_field(&p, &img, &params).unwrap();
        assert_eq!(argmax_labels(&q).unwrap().get(2, 2), 0);
        for px in 0..25 {
            assert!((q.data()[px] + q.data()[25 + px] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_unnormalized_and_large() {
        let p = Tensor::<f64>::full(&[2, 2, 2], 0.7).unwrap();
        let img = Tensor::zeros(&[3, 2, 2]).unwrap();
        assert!(mean_field(&p, &img, &CrfParams::default()).is_err());
        let p = Tensor::<f64>::full(&[2, 129, 128], 0.5).unwrap();
        let img = Tensor::zeros(&[3, 129, 128]).unwrap();
        assert!(mean_field(&p, &img, &CrfParams::default()).is_err());
    }

    #[test]
    fn ties_go_low() {
        let p = Tensor::<f64>::from_vec(&[3, 1, 2], vec![0.4, 0.2, 0.4, 0.5, 0.2, 0.3]).unwrap();
        assert_eq!(argmax_labels(&p).unwrap().data, vec![0, 1]);
    }
}
