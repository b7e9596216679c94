use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from the loss and from every metric.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel softmax over the channel axis, with max subtraction.
pub fn softmax_pixelwise<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, l, h, w) = logits.nchw()?;
    if l < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 labels, got {l}")));
    }
    let plane = h * w;
    let z = logits.data();
    let mut out = vec![T::zero(); z.len()];
    for b in 0..n {
        let base = b * l * plane;
        for px in 0..plane {
            let mut m = T::neg_infinity();
            for c in 0..l {
                m = m.max(z[base + c * plane + px]);
            }
            let mut s = T::zero();
            for c in 0..l {
                let e = (z[base + c * plane + px] - m).exp();
                out[base + c * plane + px] = e;
                s += e;
            }
            for c in 0..l {
                out[base + c * plane + px] /= s;
            }
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Vector-Jacobian product of the softmax: `gz = p * (gp - <gp, p>)` per pixel.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, gp: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, l, h, w) = probs.nchw()?;
    let plane = h * w;
    let p = probs.data();
    let g = gp.data();
    let mut out = vec![T::zero(); p.len()];
    for b in 0..n {
        let base = b * l * plane;
        for px in 0..plane {
            let mut inner = T::zero();
            for c in 0..l {
                inner += g[base + c * plane + px] * p[base + c * plane + px];
            }
            for c in 0..l {
                let k = base + c * plane + px;
                out[k] = p[k] * (g[k] - inner);
            }
        }
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), out))
}

/// Checks a label tensor against a `[L,H,W]` / `[N,L,H,W]` prediction and
/// returns the number of scored pixels.
fn scored_pixels<T: Scalar>(pred: &Tensor<T>, labels: &Tensor<T>, ignore: u8) -> Result<usize> {
    let (n, l, h, w) = pred.nchw()?;
    if labels.len() != n * h * w {
        return Err(Error::shape(format!(
            "labels {:?} do not match prediction {:?}",
            labels.shape(),
            pred.shape()
        )));
    }
    let mut count = 0;
    for &v in labels.data() {
        let lab = v.to_f64().unwrap_or(-1.0);
        if lab == ignore as f64 {
            continue;
        }
        if lab < 0.0 || lab.fract() != 0.0 || lab >= l as f64 {
            return Err(Error::arg(format!("label {lab} outside 0..{l}")));
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::arg("every pixel carries the ignore label"));
    }
    Ok(count)
}

/// Mean of `-ln p[label]` over pixels whose label is not `ignore`.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, ignore: u8) -> Result<T> {
    let count = scored_pixels(probs, labels, ignore)?;
    let (_, l, h, w) = probs.nchw()?;
    let plane = h * w;
    let p = probs.data();
    let mut total = T::zero();
    for (k, &v) in labels.data().iter().enumerate() {
        let lab = v.to_usize().unwrap_or(usize::MAX);
        if lab == ignore as usize {
            continue;
        }
        let (b, px) = (k / plane, k % plane);
        total -= p[(b * l + lab) * plane + px].ln();
    }
    Ok(total / T::of(count as f64))
}

/// Gradient of [`cross_entropy_loss`] with respect to the probabilities.
pub fn cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, ignore: u8, upstream: T) -> Result<Tensor<T>> {
    let count = scored_pixels(probs, labels, ignore)?;
    let (_, l, h, w) = probs.nchw()?;
    let plane = h * w;
    let p = probs.data();
    let mut g = vec![T::zero(); p.len()];
    let scale = upstream / T::of(count as f64);
    for (k, &v) in labels.data().iter().enumerate() {
        let lab = v.to_usize().unwrap_or(usize::MAX);
        if lab == ignore as usize {
            continue;
        }
        let at = ((k / plane) * l + lab) * plane + k % plane;
        g[at] = -scale / p[at];
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), g))
}

/// Softmax followed by cross entropy, computed from logits. Returns the loss
/// and the probabilities, which the backward pass reuses.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, ignore: u8) -> Result<(T, Tensor<T>)> {
    let probs = softmax_pixelwise(logits)?;
    let count = scored_pixels(&probs, labels, ignore)?;
    let (_, l, h, w) = logits.nchw()?;
    let plane = h * w;
    let z = logits.data();
    let mut total = T::zero();
    for (k, &v) in labels.data().iter().enumerate() {
        let lab = v.to_usize().unwrap_or(usize::MAX);
        if lab == ignore as usize {
            continue;
        }
        let (b, px) = (k / plane, k % plane);
        // -ln softmax = logsumexp(z) - z_label
        let mut m = T::neg_infinity();
        for c in 0..l {
            m = m.max(z[(b * l + c) * plane + px]);
        }
        let mut s = T::zero();
        for c in 0..l {
            s += (z[(b * l + c) * plane + px] - m).exp();
        }
        total += m + s.ln() - z[(b * l + lab) * plane + px];
    }
    Ok((total / T::of(count as f64), probs))
}

/// `(p - onehot) / count` at scored pixels, zero at ignored ones.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, ignore: u8, upstream: T) -> Result<Tensor<T>> {
    let count = scored_pixels(probs, labels, ignore)?;
    let (_, l, h, w) = probs.nchw()?;
    let plane = h * w;
    let p = probs.data();
    let scale = upstream / T::of(count as f64);
    let mut g = vec![T::zero(); p.len()];
    for (k, &v) in labels.data().iter().enumerate() {
        let lab = v.to_usize().unwrap_or(usize::MAX);
        if lab == ignore as usize {
            continue;
        }
        let (b, px) = (k / plane, k % plane);
        for c in 0..l {
            let at = (b * l + c) * plane + px;
            let onehot = if c == lab { T::one() } else { T::zero() };
            g[at] = scale * (p[at] - onehot);
        }
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let z = Tensor::<f64>::zeros(&[8, 2, 3]).unwrap();
        let p = softmax_pixelwise(&z).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn closed_form_pair() {
        let z = Tensor::<f64>::from_vec(&[2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let p = softmax_pixelwise(&z).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn shift_invariant_and_overflow_safe() {
        let z = Tensor::<f64>::from_vec(&[3, 1, 2], vec![0.1, -2.0, 1.3, 0.7, -0.4, 2.2]).unwrap();
        let shifted = z.map(|v| v + 100.0);
        let a = softmax_pixelwise(&z).unwrap();
        let b = softmax_pixelwise(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-7);
        let huge = z.map(|v| v * 1e4);
        assert!(softmax_pixelwise(&huge).unwrap().all_finite());
    }

    #[test]
    fn single_label_rejected() {
        let z = Tensor::<f64>::zeros(&[1, 2, 2]).unwrap();
        assert!(softmax_pixelwise(&z).is_err());
    }

    #[test]
    fn loss_values() {
        let onehot = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(cross_entropy_loss(&onehot, &labels, IGNORE_LABEL).unwrap(), 0.0);

        let uniform = Tensor::<f64>::full(&[5, 2, 2], 0.2).unwrap();
        let labels = Tensor::from_vec(&[2, 2], vec![0.0, 4.0, 2.0, 1.0]).unwrap();
        assert!((cross_entropy_loss(&uniform, &labels, IGNORE_LABEL).unwrap() - 5f64.ln()).abs() < 1e-15);

        // 2x1 image: pixel 0 scored with p=0.5, pixel 1 ignored
        let probs = Tensor::<f64>::from_vec(&[2, 2, 1], vec![0.5, 0.9, 0.5, 0.1]).unwrap();
        let labels = Tensor::from_vec(&[2, 1], vec![0.0, 255.0]).unwrap();
        assert!((cross_entropy_loss(&probs, &labels, IGNORE_LABEL).unwrap() + 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_errors() {
        let probs = Tensor::<f64>::full(&[2, 1, 2], 0.5).unwrap();
        let all_ignored = Tensor::from_vec(&[1, 2], vec![255.0, 255.0]).unwrap();
        assert!(matches!(cross_entropy_loss(&probs, &all_ignored, IGNORE_LABEL), Err(Error::Argument(_))));
        let out_of_range = Tensor::from_vec(&[1, 2], vec![0.0, 2.0]).unwrap();
        assert!(matches!(cross_entropy_loss(&probs, &out_of_range, IGNORE_LABEL), Err(Error::Argument(_))));
    }

    #[test]
    fn fused_matches_composition() {
        let z = Tensor::<f64>::from_vec(&[3, 1, 2], vec![0.1, -2.0, 1.3, 0.7, -0.4, 2.2]).unwrap();
        let labels = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        let (fused, probs) = softmax_cross_entropy(&z, &labels, IGNORE_LABEL).unwrap();
        let composed = cross_entropy_loss(&probs, &labels, IGNORE_LABEL).unwrap();
        assert!((fused - composed).abs() < 1e-14);

        let g_fused = softmax_cross_entropy_backward(&probs, &labels, IGNORE_LABEL, 1.0).unwrap();
        let gp = cross_entropy_backward(&probs, &labels, IGNORE_LABEL, 1.0).unwrap();
        let g_composed = softmax_backward(&probs, &gp).unwrap();
        assert!(g_fused.max_abs_diff(&g_composed) < 1e-14);
    }
}
