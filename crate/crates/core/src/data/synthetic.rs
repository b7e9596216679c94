//! A segmentation task that local context cannot solve.
//!
//! Each canvas is a horizontal strip. A small colored cue sits in the top-left
//! corner; a vertical band further right carries the label named by the cue
//! color. The band texture is drawn the same way for every class, so nothing
//! inside or near the band says which class it is. Everything else, the cue
//! included, is background class 0.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::sample::{Dataset, LabelMap, SegSample};

/// Stream offset separating the class schedule from per-sample draws.
const SCHEDULE_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct LongRangeTaskConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Side of the square cue at the top-left corner.
    pub cue_size: usize,
    /// First column of the band.
    pub band_start: usize,
    pub band_width: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for LongRangeTaskConfig {
    fn default() -> Self {
        LongRangeTaskConfig {
            height: 16,
            width: 336,
            classes: 4,
            cue_size: 8,
            band_start: 240,
            band_width: 96,
            noise: 0.05,
            seed: 42,
        }
    }
}

impl LongRangeTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 64 {
            return Err(Error::config(format!("classes must be in 2..=64, got {}", self.classes)));
        }
        if self.cue_size == 0 || self.cue_size > self.height || self.cue_size > self.width {
            return Err(Error::config(format!(
                "cue of {} px does not fit a {}x{} canvas",
                self.cue_size, self.height, self.width
            )));
        }
        if self.band_width == 0 || self.band_start + self.band_width > self.width {
            return Err(Error::config(format!(
                "band [{}, {}) leaves the {}-px canvas",
                self.band_start,
                self.band_start + self.band_width,
                self.width
            )));
        }
        if self.band_start < self.cue_size {
            return Err(Error::config(format!(
                "band starting at column {} overlaps the {}-px cue",
                self.band_start, self.cue_size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Columns strictly between the cue and the band.
    pub fn separation(&self) -> usize {
        self.band_start - self.cue_size
    }

    /// Fraction of pixels that belong to the band.
    pub fn band_fraction(&self) -> f64 {
        self.band_width as f64 / self.width as f64
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = LongRangeTaskConfig::default();
        let (height, width) = kv.size_or("canvas", (d.height, d.width))?;
        let cfg = LongRangeTaskConfig {
            height,
            width,
            classes: kv.parse_or("L", d.classes)?,
            cue_size: kv.parse_or("cue", d.cue_size)?,
            band_start: kv.parse_or("band_start", d.band_start)?,
            band_width: kv.parse_or("band_width", d.band_width)?,
            noise: kv.parse_or("noise", d.noise)?,
            seed: kv.parse_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cue color of class `k` out of `classes`: evenly spaced hues at full
/// saturation.
pub fn cue_color(k: usize, classes: usize) -> [f32; 3] {
    let h = 6.0 * k as f32 / classes as f32;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Band classes for samples `0..n`: every block of `classes` consecutive
/// samples holds each class once, in a seeded order.
pub fn class_schedule(n: usize, cfg: &LongRangeTaskConfig) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut block = 0u64;
    while out.len() < n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SCHEDULE_STREAM + block);
        let mut perm: Vec<usize> = (0..cfg.classes).collect();
        perm.shuffle(&mut rng);
        out.extend(perm.into_iter().take(n - out.len()));
        block += 1;
    }
    out
}

/// Sample `index` of the task; a pure function of `(index, class, cfg)`.
pub fn generate_sample(index: usize, class: usize, cfg: &LongRangeTaskConfig) -> Result<SegSample> {
    cfg.validate()?;
    if class >= cfg.classes {
        return Err(Error::arg(format!("class {class} outside 0..{}", cfg.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0f64, cfg.noise).map_err(|e| Error::config(e.to_string()))?;
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let stripe_phase = rng.random_range(0..4usize);
    let cue = cue_color(class, cfg.classes);
    let band = cfg.band_start..cfg.band_start + cfg.band_width;

    let mut image = vec![0.0f32; 3 * plane];
    let mut labels = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let base: [f32; 3] = if y < cfg.cue_size && x < cfg.cue_size {
                cue
            } else if band.contains(&x) {
                labels[i] = class as u8;
                // Vertical stripes, the same for every class.
                let v = if (x + stripe_phase) % 4 < 2 { 0.8 } else { 0.2 };
                [v, v, v]
            } else {
                [0.5, 0.5, 0.5]
            };
            for c in 0..3 {
                let v = f64::from(base[c]) + noise.sample(&mut rng);
                image[c * plane + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    SegSample::new(Tensor::from_vec(&[3, h, w], image)?, LabelMap::new(h, w, labels)?)
}

/// `n` samples with exactly balanced band classes per block of `L`.
pub fn generate_longrange_task(n: usize, cfg: &LongRangeTaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let samples = class_schedule(n, cfg)
        .into_iter()
        .enumerate()
        .map(|(i, k)| generate_sample(i, k, cfg))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.classes, samples)
}

/// `train + test` samples with `train` and `test` splits over one stream.
pub fn generate_longrange_splits(train: usize, test: usize, cfg: &LongRangeTaskConfig) -> Result<Dataset> {
    let mut ds = generate_longrange_task(train + test, cfg)?;
    ds.splits.insert("train".into(), (0..train).collect());
    ds.splits.insert("test".into(), (train..train + test).collect());
    Ok(ds)
}

/// Labels a sample by reading the cue: nearest palette color of the mean cue
/// pixel, painted over the band.
pub fn cue_oracle(sample: &SegSample, cfg: &LongRangeTaskConfig) -> LabelMap {
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let d = sample.image.data();
    let mut mean = [0.0f32; 3];
    for y in 0..cfg.cue_size {
        for x in 0..cfg.cue_size {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += d[c * plane + y * w + x];
            }
        }
    }
    let n = (cfg.cue_size * cfg.cue_size) as f32;
    let class = (0..cfg.classes)
        .min_by(|&a, &b| {
            let da = dist2(&mean, &cue_color(a, cfg.classes), n);
            let db = dist2(&mean, &cue_color(b, cfg.classes), n);
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    let mut labels = vec![0u8; plane];
    for y in 0..h {
        for x in cfg.band_start..cfg.band_start + cfg.band_width {
            labels[y * w + x] = class as u8;
        }
    }
    LabelMap {
        height: h,
        width: w,
        data: labels,
    }
}

fn dist2(sum: &[f32; 3], color: &[f32; 3], n: f32) -> f32 {
    sum.iter().zip(color).map(|(s, c)| (s / n - c).powi(2)).sum()
}
