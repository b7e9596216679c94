use std::fmt::Write as _;

use crate::data::{Dataset, LabelMap};
use crate::densecrf::argmax_labels;
use crate::error::{Error, Result};
use crate::layers::IGNORE_LABEL;
use crate::models::Network;
use crate::tensor::Scalar;

/// Pixel counts pooled over a dataset: `counts[gt * classes + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds one prediction. Pixels labeled ignore are skipped; predictions
    /// must be valid classes.
    pub fn add(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if (gt.height, gt.width) != (pred.height, pred.width) {
            return Err(Error::shape(format!(
                "prediction {}x{} does not match ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (usize::from(g), usize::from(p));
            if g >= self.classes || p >= self.classes {
                return Err(Error::arg(format!("label {} outside 0..{}", g.max(p), self.classes)));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn report(&self) -> Result<EvalReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::arg("no scored pixels to evaluate"));
        }
        let l = self.classes;
        let correct: u64 = (0..l).map(|c| self.get(c, c)).sum();
        let mut per_class_iou = Vec::with_capacity(l);
        let mut recalls = Vec::new();
        for c in 0..l {
            let tp = self.get(c, c);
            let gt: u64 = (0..l).map(|p| self.get(c, p)).sum();
            let pred: u64 = (0..l).map(|g| self.get(g, c)).sum();
            let union = gt + pred - tp;
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
            if gt > 0 {
                recalls.push(tp as f64 / gt as f64);
            }
        }
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        Ok(EvalReport {
            pixel_accuracy: correct as f64 / total as f64,
            class_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
            mean_iou: defined.iter().sum::<f64>() / defined.len() as f64,
            per_class_iou,
            pixels: total,
        })
    }
}

/// Segmentation scores from pooled counts. Class accuracy averages recall
/// over classes present in the ground truth; mean IoU averages over classes
/// that occur in ground truth or prediction (`None` marks the others).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pixel_accuracy: f64,
    pub class_accuracy: f64,
    pub mean_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Scored (non-ignored) pixels.
    pub pixels: u64,
}

impl EvalReport {
    pub fn csv_header(classes: usize) -> String {
        let mut s = String::from("pixel_accuracy,class_accuracy,mean_iou");
        for c in 0..classes {
            let _ = write!(s, ",iou_{c}");
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{:.6},{:.6},{:.6}", self.pixel_accuracy, self.class_accuracy, self.mean_iou);
        for iou in &self.per_class_iou {
            match iou {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push_str(",nan"),
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(self.per_class_iou.len()), self.csv_row())
    }
}

/// Scores `net` on every sample at its own size.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let mut cm = ConfusionMatrix::new(data.classes);
    for s in &data.samples {
        let probs = net.forward_variable_size(&s.image.cast::<T>())?;
        cm.add(&s.labels, &argmax_labels(&probs)?)?;
    }
    cm.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&gt, &pred).unwrap();
        let r = cm.report().unwrap();
        assert_eq!(r.pixel_accuracy, 0.5);
        assert_eq!(r.class_accuracy, 0.5);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.mean_iou, 0.25);
    }

    #[test]
    fn ignore_and_empty() {
        let gt = LabelMap::new(1, 3, vec![IGNORE_LABEL, 1, IGNORE_LABEL]).unwrap();
        let pred = LabelMap::new(1, 3, vec![0, 1, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.report().is_err());
        cm.add(&gt, &pred).unwrap();
        let r = cm.report().unwrap();
        assert_eq!((r.pixels, r.pixel_accuracy, r.mean_iou), (1, 1.0, 1.0));
        assert_eq!(r.per_class_iou, vec![None, Some(1.0), None]);
    }
}
