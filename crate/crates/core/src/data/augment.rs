use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::IGNORE_LABEL;
use crate::tensor::{Scalar, Tensor};

use super::sample::{LabelMap, SegSample};

/// Mirror index into `0..n` without repeating the edge: `-1 -> 1`, `n -> n-2`.
/// Offsets further out than one period keep bouncing.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Padding amounts `(top, bottom, left, right)`.
pub type Pad = (usize, usize, usize, usize);

/// Splits the shortfall of `size` below `min` evenly, the odd pixel going
/// after.
pub fn symmetric_pad(size: (usize, usize), min: (usize, usize)) -> Pad {
    let ph = min.0.saturating_sub(size.0);
    let pw = min.1.saturating_sub(size.1);
    (ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)
}

/// Reflection-pads every plane of a `[C,H,W]` or `[N,C,H,W]` tensor.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, pad: Pad) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    let (top, bottom, left, right) = pad;
    let (oh, ow) = (h + top + bottom, w + left + right);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            let sy = reflect_index(y as isize - top as isize, h);
            for xx in 0..ow {
                let sx = reflect_index(xx as isize - left as isize, w);
                out.push(src[base + sy * w + sx]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

/// Pads labels with `IGNORE_LABEL` so padded pixels never count.
pub fn pad_labels(labels: &LabelMap, pad: Pad) -> LabelMap {
    let (top, bottom, left, right) = pad;
    let (oh, ow) = (labels.height + top + bottom, labels.width + left + right);
    let mut data = vec![IGNORE_LABEL; oh * ow];
    for y in 0..labels.height {
        let row = &labels.data[y * labels.width..(y + 1) * labels.width];
        let start = (y + top) * ow + left;
        data[start..start + labels.width].copy_from_slice(row);
    }
    LabelMap {
        height: oh,
        width: ow,
        data,
    }
}

/// Crops a `[C,H,W]` / `[N,C,H,W]` tensor to `size` at offset `(y, x)`.
pub fn crop_map<T: Scalar>(x: &Tensor<T>, at: (usize, usize), size: (usize, usize)) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if at.0 + size.0 > h || at.1 + size.1 > w || size.0 == 0 || size.1 == 0 {
        return Err(Error::arg(format!(
            "crop {}x{} at ({}, {}) does not fit {h}x{w}",
            size.0, size.1, at.0, at.1
        )));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * size.0 * size.1);
    for plane in 0..n * c {
        for y in at.0..at.0 + size.0 {
            let row = plane * h * w + y * w;
            out.extend_from_slice(&src[row + at.1..row + at.1 + size.1]);
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = size.0;
    shape[r - 1] = size.1;
    Ok(Tensor::from_parts(shape, out))
}

fn crop_labels(labels: &LabelMap, at: (usize, usize), size: (usize, usize)) -> LabelMap {
    let mut data = Vec::with_capacity(size.0 * size.1);
    for y in at.0..at.0 + size.0 {
        let row = y * labels.width;
        data.extend_from_slice(&labels.data[row + at.1..row + at.1 + size.1]);
    }
    LabelMap {
        height: size.0,
        width: size.1,
        data,
    }
}

/// Mirrors image and labels left to right.
pub fn flip_horizontal(sample: &SegSample) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let mut image = sample.image.clone();
    for row in image.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    let mut labels = sample.labels.clone();
    for row in labels.data.chunks_exact_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(labels.data.len(), h * w);
    SegSample { image, labels }
}

/// Reflection-pads a sample up to at least `min` (labels with ignore).
/// Returns the padded sample and the amounts used.
pub fn pad_sample(sample: &SegSample, min: (usize, usize)) -> Result<(SegSample, Pad)> {
    let pad = symmetric_pad((sample.height(), sample.width()), min);
    if pad == (0, 0, 0, 0) {
        return Ok((sample.clone(), pad));
    }
    Ok((
        SegSample {
            image: reflect_pad(&sample.image, pad)?,
            labels: pad_labels(&sample.labels, pad),
        },
        pad,
    ))
}

/// Deterministic core of [`augment`]: pad if needed, crop at `offset` of
/// the padded sample, then flip when `flip` is set.
pub fn augment_with(sample: &SegSample, crop: (usize, usize), offset: (usize, usize), flip: bool) -> Result<SegSample> {
    if crop.0 == 0 || crop.1 == 0 {
        return Err(Error::arg("crop size must be positive"));
    }
    let (padded, _) = pad_sample(sample, crop)?;
    let image = crop_map(&padded.image, offset, crop)?;
    let labels = crop_labels(&padded.labels, offset, crop);
    let out = SegSample { image, labels };
    Ok(if flip { flip_horizontal(&out) } else { out })
}

/// Random crop of exactly `crop` (after reflection padding if the sample is
/// smaller) and a horizontal flip with probability one half.
pub fn augment<R: Rng + ?Sized>(sample: &SegSample, crop: (usize, usize), rng: &mut R) -> Result<SegSample> {
    if crop.0 == 0 || crop.1 == 0 {
        return Err(Error::arg("crop size must be positive"));
    }
    let h = sample.height().max(crop.0);
    let w = sample.width().max(crop.1);
    let oy = rng.random_range(0..=h - crop.0);
    let ox = rng.random_range(0..=w - crop.1);
    let flip = rng.random_bool(0.5);
    augment_with(sample, crop, (oy, ox), flip)
}
