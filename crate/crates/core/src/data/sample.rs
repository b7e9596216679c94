use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::layers::IGNORE_LABEL;
use crate::tensor::{Scalar, Tensor};

use super::netpbm::{read_pnm, write_pnm, Pnm};

/// Per-pixel class indices, `IGNORE_LABEL` for unannotated pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "label map of {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// `[H,W]` tensor of label values, as the loss expects.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.data.iter().map(|&v| T::of(f64::from(v))).collect(),
        )
    }

    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE_LABEL && usize::from(v) >= classes) {
            Some(v) => Err(Error::arg(format!("label {v} outside 0..{classes}"))),
            None => Ok(()),
        }
    }
}

/// An RGB image with values in `[0, 1]` and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[3,H,W]`
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

impl SegSample {
    pub fn new(image: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("image must be [3,H,W], got {s:?}")));
        }
        if (s[1], s[2]) != (labels.height, labels.width) {
            return Err(Error::shape(format!(
                "image {}x{} and labels {}x{} differ in size",
                s[1], s[2], labels.height, labels.width
            )));
        }
        Ok(SegSample { image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

/// Samples sharing one label set, plus optional named splits (index lists).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<SegSample>,
    pub splits: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(classes: usize, samples: Vec<SegSample>) -> Result<Self> {
        for s in &samples {
            s.labels.check_range(classes)?;
        }
        Ok(Dataset {
            classes,
            samples,
            splits: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The samples listed under split `name`.
    pub fn split(&self, name: &str) -> Result<Dataset> {
        let idx = self
            .splits
            .get(name)
            .ok_or_else(|| Error::arg(format!("dataset has no split '{name}'")))?;
        let samples = idx
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::arg(format!("split '{name}' lists missing sample {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.classes, samples)
    }

    /// Writes `images/NNNN.ppm`, `labels/NNNN.pgm` and `manifest.txt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        let labels = dir.join("labels");
        for d in [&images, &labels] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            save_ppm(&images.join(format!("{i:04}.ppm")), &s.image)?;
            save_pgm_labels(&labels.join(format!("{i:04}.pgm")), &s.labels)?;
        }
        let mut kv = KeyValues::default();
        kv.set("classes", self.classes);
        kv.set("ignore", IGNORE_LABEL);
        kv.set("count", self.samples.len());
        for (name, idx) in &self.splits {
            let list: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            kv.set(&format!("split.{name}"), list.join(","));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, kv.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv = KeyValues::parse(&text)?;
        let classes: usize = kv.require("classes")?;
        let count: usize = kv.require("count")?;
        let ignore: u8 = kv.parse_or("ignore", IGNORE_LABEL)?;
        if ignore != IGNORE_LABEL {
            return Err(Error::config(format!("ignore label {ignore} is not supported (expected {IGNORE_LABEL})")));
        }
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let image = load_ppm(&dir.join("images").join(format!("{i:04}.ppm")))?;
            let labels = load_pgm_labels(&dir.join("labels").join(format!("{i:04}.pgm")))?;
            samples.push(SegSample::new(image, labels)?);
        }
        let mut ds = Dataset::new(classes, samples)?;
        for key in kv.keys() {
            if let Some(name) = key.strip_prefix("split.") {
                let raw = kv.get(key).unwrap_or("");
                let idx = raw
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::config(format!("bad index {s:?} in split '{name}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                ds.splits.insert(name.to_string(), idx);
            }
        }
        Ok(ds)
    }
}

/// Reads a P6 image into `[3,H,W]` floats in `[0, 1]`.
pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    let img = read_pnm(path)?;
    if img.channels != 3 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("{} is not a P6 image", path.display()),
        });
    }
    let plane = img.width * img.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, img.height, img.width], data)
}

/// Writes a `[3,H,W]` image, rounding to 8 bits after clamping to `[0, 1]`.
pub fn save_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("image must be [3,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = image.data();
    let mut pixels = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = d[c * plane + i].to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    write_pnm(
        path,
        &Pnm {
            width: s[2],
            height: s[1],
            channels: 3,
            pixels,
        },
    )
}

/// Label maps are stored as raw class indices in a P5 file.
pub fn save_pgm_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_pnm(
        path,
        &Pnm {
            width: labels.width,
            height: labels.height,
            channels: 1,
            pixels: labels.data.clone(),
        },
    )
}

pub fn load_pgm_labels(path: &Path) -> Result<LabelMap> {
    let img = read_pnm(path)?;
    if img.channels != 1 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("{} is not a P5 image", path.display()),
        });
    }
    LabelMap::new(img.height, img.width, img.pixels)
}
